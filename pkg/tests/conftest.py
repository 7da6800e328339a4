import pytest

_VERDICTS: dict[str, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def verdict():
    """Record one pass/fail line per acceptance criterion."""

    def record(key: str, passed: bool, detail: str) -> bool:
        _VERDICTS[key] = (bool(passed), detail)
        print(f"{key} {'PASS' if passed else 'FAIL'}  {detail}")
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for key in sorted(_VERDICTS, key=lambda k: int(k[1:])):
        passed, detail = _VERDICTS[key]
        terminalreporter.write_line(f"{key:<4}{'PASS' if passed else 'FAIL'}  {detail}")
