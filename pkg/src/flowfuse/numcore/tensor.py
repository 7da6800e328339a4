"""Tensor container and the gradient tape.

Operations in :mod:`flowfuse.numcore.ops` record themselves on the innermost
active :class:`Tape` whenever one of their inputs requires a gradient.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

_DTYPE = [np.float32]
_TAPES: list["Tape"] = []


class NumericError(FloatingPointError):
    """Raised when a non-finite value shows up in a forward or backward pass."""


def default_dtype():
    return _DTYPE[-1]


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the dtype used by :func:`tensor` (e.g. ``np.float64``
    for gradient checks)."""
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype}")
    _DTYPE.append(dtype)
    try:
        yield
    finally:
        _DTYPE.pop()


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data: np.ndarray, requires_grad: bool = False, name: str | None = None):
        self.data = data
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        from . import ops

        if isinstance(other, Tensor):
            raise TypeError("only scalar multiplication is supported")
        return ops.mul_scalar(self, float(other))

    __rmul__ = __mul__


def tensor(data, requires_grad: bool = False, dtype=None, name: str | None = None) -> Tensor:
    arr = np.ascontiguousarray(data, dtype=dtype or default_dtype())
    return Tensor(arr, requires_grad=requires_grad, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else tensor(x)


BackwardFn = Callable[[np.ndarray, Sequence[bool]], Sequence["np.ndarray | None"]]


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager around a forward pass, then call
    :meth:`backward` exactly once::

        with Tape() as tape:
            loss = ops.mean(ops.silu(x))
        grads = tape.backward(loss)
        grads[x]
    """

    def __init__(self):
        self._entries: list[tuple[Tensor, tuple[Tensor, ...], BackwardFn]] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self._entries)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn: BackwardFn) -> None:
        if self.consumed:
            raise RuntimeError("cannot record on a tape that has already been replayed")
        self._entries.append((out, inputs, backward_fn))

    def backward(self, loss: Tensor, check_finite: bool = True) -> dict[Tensor, np.ndarray]:
        """Replay the tape in reverse and return gradients for every leaf
        tensor with ``requires_grad``."""
        if self.consumed:
            raise RuntimeError("tape already consumed by a previous backward call")
        if loss.data.size != 1:
            raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
        self.consumed = True
        produced = {id(out) for out, _, _ in self._entries}
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        entries, self._entries = self._entries, []
        while entries:
            out, inputs, fn = entries.pop()
            g = grads.pop(id(out), None)
            if g is None:
                continue
            needs = [t.requires_grad for t in inputs]
            in_grads = fn(g, needs)
            for t, need, gi in zip(inputs, needs, in_grads):
                if not need or gi is None:
                    continue
                key = id(t)
                if key not in produced:
                    leaves[key] = t
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        result = {}
        for key, t in leaves.items():
            g = grads[key]
            if check_finite and not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for leaf {t.name or t!r}")
            result[t] = g
        return result


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def record(out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    """Wrap an op result; register it on the active tape when differentiable."""
    inputs = tuple(inputs)
    needs_grad = any(t.requires_grad for t in inputs)
    tape = active_tape()
    out = Tensor(out_data, requires_grad=needs_grad and tape is not None)
    if out.requires_grad:
        tape.record(out, inputs, backward_fn)
    return out
