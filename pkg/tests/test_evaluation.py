import numpy as np
import pytest

from flowfuse import evaluation as ev
from flowfuse import metrics as mt
from flowfuse import scenegen as sg

WORLD = sg.WorldConfig(size=16, series_length=5, seed=0)


@pytest.fixture(scope="module")
def scenes():
    samples = sg.make_samples(WORLD) + sg.make_samples(sg.replace(WORLD, seed=1))
    norm = sg.compute_coefficients([s.scene.raster for s in samples])
    return ev.prepare(samples, norm), norm


def oracle(scenes):
    """Field whose Euler path lands exactly on each scene's truth."""
    truth = {id(sc.cond.composite): sc.truth for sc in scenes}
    state = {}

    def u(x, t, conds, metas):
        if float(t[0]) == 0.0:
            state["x0"] = x.copy()
        return np.stack([truth[id(c.composite)] for c in conds]) - state["x0"]

    return u


def test_decode_round_trip(scenes):
    sc, norm = scenes
    np.testing.assert_allclose(ev.decode(sc[0].truth, norm), sc[0].sample.scene.raster, atol=1e-6)
    assert ev.decode(np.full((2, 2, 6), 50.0), norm).max() == 1.0


def test_oracle_downscale_is_perfect(scenes):
    sc, norm = scenes
    rows = ev.downscale_rows(oracle(sc), norm, sc, steps=3, seeds=[0, 1], batch=3)
    assert len(rows) == 2 * len(sc)
    assert all(float(r["ssim"]) > 1 - 1e-6 for r in rows)
    assert all(float(r["sid"]) < 1e-9 for r in rows)


def test_impute_rows_layout(scenes):
    sc, norm = scenes
    rows = ev.impute_rows(oracle(sc), norm, sc, [0.25, 0.5], steps=2, seeds=[3])
    assert len(rows) == len(sc) * 2 * 2
    for r in rows:
        assert float(r["cloud_fraction"]) == pytest.approx(r["coverage"], abs=0.02)
        assert float(r["ssim"]) > 1 - 1e-6
    agg = ev.aggregate(rows)
    assert [(a["coverage"], a["with_modis"]) for a in agg] == [(0.25, 0), (0.25, 1), (0.5, 0),
                                                                (0.5, 1)]
    assert all(a["n"] == len(sc) for a in agg)


def test_masks_depend_on_seed_and_scene():
    a = ev.eval_mask(16, 0.5, 0, 0)
    assert np.array_equal(a, ev.eval_mask(16, 0.5, 0, 0))
    assert not np.array_equal(a, ev.eval_mask(16, 0.5, 1, 0))
    assert not np.array_equal(a, ev.eval_mask(16, 0.5, 0, 1))


def test_baselines_score_against_truth(scenes):
    sc, _ = scenes
    rows = ev.baseline_rows(sc, WORLD.coarse_factor)
    assert [r["method"] for r in rows[:2]] == ["upsample", "starfm_lite"]
    up = ev.mean_metric(rows, "ssim", method="upsample")
    assert 0 < up < 1
    with pytest.raises(ValueError):
        ev.mean_metric(rows, "ssim", method="nothing")


def test_aggregate_means():
    rows = [mt.metrics_row("a", 0.1, True, mt.MetricsReport(0.1, 0.5, 20.0, 4, {}), "flow", 5, 0),
            mt.metrics_row("b", 0.3, True, mt.MetricsReport(0.3, 0.7, 30.0, 4, {}), "flow", 5, 0)]
    for r in rows:
        r.update(protocol="impute", coverage=0.25)
    (agg,) = ev.aggregate(rows)
    assert float(agg["sid"]) == pytest.approx(0.2)
    assert float(agg["ssim"]) == pytest.approx(0.6)
    assert mt.parse_psnr(agg["psnr"]) == pytest.approx(25.0)


def test_steps_rows_oracle(scenes):
    sc, norm = scenes
    rows = ev.steps_rows(oracle(sc), norm, sc, [1, 4])
    assert [r["steps"] for r in rows] == [1, 4]
    assert all(r["ssim"] > 1 - 1e-6 for r in rows)
