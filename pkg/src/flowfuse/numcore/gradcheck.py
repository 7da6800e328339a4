"""Central finite-difference checks for tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import ops
from .tensor import Tape, Tensor, precision


def _scalar_loss(fn, arrays, target):
    # evaluated in float64 so that only ``fn`` itself carries rounding error
    out = fn(*[Tensor(a) for a in arrays]).data.astype(np.float64)
    return float(np.mean((out - target) ** 2))


def relative_error(a: np.ndarray, b: np.ndarray, zero_tol: float = 0.0) -> float:
    """``|a - b| / max(|a|, |b|)``; 0 when both norms are within ``zero_tol``
    (a gradient that is exactly zero by construction)."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if max(np.linalg.norm(a), np.linalg.norm(b)) <= zero_tol:
        return 0.0
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-30)
    return float(np.linalg.norm(a - b) / denom)


def check_gradients(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    dtype=np.float64,
    eps: float | None = None,
    mode: str = "elementwise",
    max_entries: int | None = None,
    directions: int = 3,
    seed: int = 0,
    zero_tol: float = 0.0,
    reference_dtype=None,
) -> list[float]:
    """Compare tape gradients of ``mse(fn(*inputs), target)`` with central
    differences; returns one relative error per input.

    ``mode="elementwise"`` perturbs entries one at a time (optionally a random
    subset of ``max_entries``); ``mode="directional"`` compares directional
    derivatives along random +-1 directions, which is the meaningful test in
    32-bit arithmetic.

    ``reference_dtype`` evaluates the finite differences at the same
    (``dtype``-rounded) points in another precision, so a 32-bit tape can be
    checked against a reference free of 32-bit forward rounding.
    """
    dtype = np.dtype(dtype).type
    if eps is None:
        eps = 1e-6 if dtype is np.float64 else 1e-3
    rng = np.random.default_rng(seed)
    arrays = [np.ascontiguousarray(a, dtype=dtype) for a in inputs]
    ref = np.dtype(reference_dtype or dtype).type
    with precision(dtype):
        leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
        out_shape = fn(*[Tensor(a) for a in arrays]).shape
        target = rng.standard_normal(out_shape).astype(dtype)
        with Tape() as tape:
            loss = ops.mse(fn(*leaves), target)
        grads = tape.backward(loss)

    def loss_at(work):
        with precision(ref):
            return _scalar_loss(fn, [w.astype(ref) for w in work], target)

    errors = []
    for idx, (leaf, base) in enumerate(zip(leaves, arrays)):
        g = grads.get(leaf, np.zeros_like(base)).astype(np.float64)
        if mode == "elementwise":
            flat = np.arange(base.size)
            if max_entries is not None and base.size > max_entries:
                flat = rng.choice(base.size, size=max_entries, replace=False)
            fd = np.empty(len(flat))
            for k, pos in enumerate(flat):
                work = [a.copy() for a in arrays]
                work[idx].flat[pos] += eps
                up = loss_at(work)
                work[idx].flat[pos] -= 2 * eps
                down = loss_at(work)
                fd[k] = (up - down) / (2 * eps)
            errors.append(relative_error(g.ravel()[flat], fd, zero_tol))
        elif mode == "directional":
            ad, fd = [], []
            for _ in range(directions):
                # every coordinate moves by exactly +-eps
                v = rng.choice([-1.0, 1.0], size=base.shape)
                work = [a.copy() for a in arrays]
                hi = (base + eps * v).astype(dtype)
                lo = (base - eps * v).astype(dtype)
                work[idx] = hi
                up = loss_at(work)
                work[idx] = lo
                down = loss_at(work)
                # the step actually taken after rounding to ``dtype``
                step = hi.astype(np.float64) - lo.astype(np.float64)
                fd.append(up - down)
                ad.append(float(np.sum(g * step)))
            errors.append(relative_error(np.array(ad), np.array(fd), zero_tol))
        else:
            raise ValueError(f"unknown mode {mode!r}")
    return errors
