"""Differentiable primitives needed by the vector-field U-Net.

All image tensors are ``(N, C, H, W)``. Every op computes its forward result
with numpy and, when recording, a closure that maps the output gradient to
input gradients.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import NumericError, Tensor, as_tensor, record


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{op} produced a non-finite value")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward(g, needs):
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(g, b.shape) if needs[1] else None,
        )

    return record(out, (a, b), backward)


def mul_scalar(a: Tensor, s: float) -> Tensor:
    out = a.data * a.data.dtype.type(s)

    def backward(g, needs):
        return (g * g.dtype.type(s),)

    return record(out, (a,), backward)


def scale_shift(x: Tensor, ss: Tensor) -> Tensor:
    """Per-sample, per-channel modulation ``x * (1 + scale) + shift`` where
    ``ss`` is ``(N, 2C)`` holding ``[scale | shift]``."""
    n, c = x.shape[:2]
    if ss.shape != (n, 2 * c):
        raise ValueError(f"scale_shift needs modulation of shape {(n, 2 * c)}, got {ss.shape}")
    extra = (1,) * (x.data.ndim - 2)
    scale = ss.data[:, :c].reshape(n, c, *extra)
    shift = ss.data[:, c:].reshape(n, c, *extra)
    out = x.data * (1 + scale) + shift

    def backward(g, needs):
        gx = g * (1 + scale) if needs[0] else None
        gss = None
        if needs[1]:
            axes = tuple(range(2, g.ndim))
            gss = np.concatenate([(g * x.data).sum(axis=axes), g.sum(axis=axes)], axis=1)
        return gx, gss

    return record(out, (x, ss), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = a.data.reshape(shape)

    def backward(g, needs):
        return (g.reshape(a.shape),)

    return record(out, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g, needs):
        return tuple(np.split(g, bounds, axis=axis))

    return record(out, tensors, backward)


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    out = np.asarray(a.data.sum(dtype=np.float64), dtype=a.dtype)

    def backward(g, needs):
        return (np.full(a.shape, g, dtype=a.dtype),)

    return record(out, (a,), backward)


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    out = np.asarray(a.data.mean(dtype=np.float64), dtype=a.dtype)

    def backward(g, needs):
        return (np.full(a.shape, g / n, dtype=a.dtype),)

    return record(out, (a,), backward)


def mse(pred: Tensor, target) -> Tensor:
    """Mean of squared differences over every element."""
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"mse shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    out = np.asarray(np.mean(np.square(diff, dtype=np.float64)), dtype=pred.dtype)
    _check_finite(out, "mse")

    def backward(g, needs):
        gd = diff * diff.dtype.type(2.0 * float(g) / n)
        return (gd if needs[0] else None, -gd if needs[1] else None)

    return record(out, (pred, target), backward)


def silu(a: Tensor) -> Tensor:
    x = a.data
    sig = 1.0 / (1.0 + np.exp(-x))
    out = x * sig

    def backward(g, needs):
        return (g * sig * (1.0 + x * (1.0 - sig)),)

    return record(out, (a,), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape ``(N, in)``."""
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear: input features {x.shape[-1]} != weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g, needs):
        grads = [
            g @ weight.data if needs[0] else None,
            g.T @ x.data if needs[1] else None,
        ]
        if bias is not None:
            grads.append(g.sum(axis=0) if needs[2] else None)
        return grads

    return record(out, inputs, backward)


def _conv_shapes(x_shape, w_shape, stride, padding):
    if len(x_shape) != 4 or len(w_shape) != 4:
        raise ValueError(f"conv2d expects 4-D input and kernel, got {x_shape} and {w_shape}")
    n, cin, h, w = x_shape
    cout, cin_w, kh, kw = w_shape
    if cin != cin_w:
        raise ValueError(f"conv2d channel mismatch: input has {cin}, kernel expects {cin_w}")
    if kh != kw or kh % 2 == 0:
        raise ValueError(f"conv2d needs a square odd kernel, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d needs stride >= 1 and padding >= 0")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ValueError(f"conv2d input {h}x{w} smaller than kernel {kh} with padding {padding}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    return n, cin, h, w, cout, kh, ho, wo


def _to_padded_nhwc(x, p):
    n, c, h, w = x.shape
    xl = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=x.dtype)
    xl[:, p : p + h, p : p + w] = x.transpose(0, 2, 3, 1)
    return xl


def _im2col(xl, k, stride, ho, wo):
    """Rows are output pixels ``(n, y, x)``; columns are ``(i, j, c)``."""
    n, _, _, c = xl.shape
    sn, sh, sw, sc = xl.strides
    win = as_strided(xl, (n, ho, wo, k, k, c), (sn, sh * stride, sw * stride, sh, sw, sc))
    return win.reshape(n * ho * wo, k * k * c)


def _conv_direct(xp, w, stride, ho, wo):
    k = w.shape[2]
    out = np.zeros((xp.shape[0], w.shape[0], ho, wo), dtype=np.result_type(xp, w))
    for i in range(k):
        for j in range(k):
            win = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
            out += np.einsum("oc,nchw->nohw", w[:, :, i, j], win)
    return out


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    algorithm: str = "im2col",
) -> Tensor:
    """2-D cross-correlation. ``algorithm="direct"`` accumulates one
    channel contraction per kernel offset; the default lowers to a single
    matrix product."""
    n, cin, h, w, cout, k, ho, wo = _conv_shapes(x.shape, weight.shape, stride, padding)
    xl = _to_padded_nhwc(x.data, padding)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(cout, k * k * cin)
    if algorithm == "im2col":
        cols = _im2col(xl, k, stride, ho, wo)
        out = (cols @ wmat.T).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    elif algorithm == "direct":
        cols = None
        out = _conv_direct(xl.transpose(0, 3, 1, 2), weight.data, stride, ho, wo)
    else:
        raise ValueError(f"unknown conv algorithm {algorithm!r}")
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)
    out = np.ascontiguousarray(out)
    _check_finite(out, "conv2d")
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g, needs):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        c = cols if cols is not None else _im2col(xl, k, stride, ho, wo)
        gx = gw = gb = None
        if needs[1]:
            gw = (g2.T @ c).reshape(cout, k, k, cin).transpose(0, 3, 1, 2)
        if needs[0] and stride == 1 and padding <= k - 1 and cols is not None:
            # stride-1 input gradient is a correlation with the flipped kernel
            gl = _to_padded_nhwc(g, k - 1 - padding)
            wflip = weight.data[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(k * k * cout, cin)
            gx = (_im2col(gl, k, 1, h, w) @ wflip).reshape(n, h, w, cin).transpose(0, 3, 1, 2)
            gx = np.ascontiguousarray(gx)
        elif needs[0]:
            dcols = (g2 @ wmat).reshape(n, ho, wo, k, k, cin)
            dxl = np.zeros(xl.shape, dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    dxl[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[
                        :, :, :, i, j
                    ]
            gx = dxl[:, padding : padding + h, padding : padding + w].transpose(0, 3, 1, 2)
            gx = np.ascontiguousarray(gx)
        if bias is not None and needs[2]:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw) if bias is None else (gx, gw, gb)

    return record(out, inputs, backward)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)
    n, c, h, w = x.shape

    def backward(g, needs):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return record(out, (x,), backward)


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    n, c, h, w = x.shape
    if groups < 1 or c % groups:
        raise ValueError(f"group_norm: {c} channels not divisible into {groups} groups")
    if eps <= 0:
        raise ValueError("group_norm: eps must be positive")
    xr = x.data.reshape(n, groups, -1)
    mu = xr.mean(axis=2, keepdims=True)
    xc = xr - mu
    var = np.mean(xc * xc, axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(n, c, h, w)
    out = xhat * gamma.data.reshape(1, c, 1, 1) + beta.data.reshape(1, c, 1, 1)

    def backward(g, needs):
        gx = gg = gb = None
        if needs[1]:
            gg = (g * xhat).sum(axis=(0, 2, 3))
        if needs[2]:
            gb = g.sum(axis=(0, 2, 3))
        if needs[0]:
            dxhat = (g * gamma.data.reshape(1, c, 1, 1)).reshape(n, groups, -1)
            xh = xhat.reshape(n, groups, -1)
            gx = inv * (
                dxhat
                - dxhat.mean(axis=2, keepdims=True)
                - xh * (dxhat * xh).mean(axis=2, keepdims=True)
            )
            gx = gx.reshape(n, c, h, w)
        return gx, gg, gb

    return record(out, (x, gamma, beta), backward)


def self_attention(
    x: Tensor,
    heads: int,
    w_qkv: Tensor,
    b_qkv: Tensor,
    w_out: Tensor,
    b_out: Tensor,
) -> Tensor:
    """Residual multi-head self-attention over the ``H*W`` spatial tokens.

    ``w_qkv`` is ``(3C, C)`` producing queries, keys and values stacked in
    that order; ``w_out`` is ``(C, C)``.
    """
    n, c, h, w = x.shape
    if heads < 1 or c % heads:
        raise ValueError(f"self_attention: {c} channels not divisible into {heads} heads")
    L, d = h * w, c // heads
    scale = 1.0 / math.sqrt(d)
    tokens = x.data.reshape(n, c, L).transpose(0, 2, 1)  # (n, L, c)
    qkv = tokens @ w_qkv.data.T + b_qkv.data  # (n, L, 3c)
    q, k, v = (
        qkv[..., i * c : (i + 1) * c].reshape(n, L, heads, d).transpose(0, 2, 1, 3) for i in range(3)
    )
    scores = (q @ k.transpose(0, 1, 3, 2)) * scale
    scores = scores - scores.max(axis=-1, keepdims=True)
    p = np.exp(scores)
    p /= p.sum(axis=-1, keepdims=True)
    o = (p @ v).transpose(0, 2, 1, 3).reshape(n, L, c)
    y = o @ w_out.data.T + b_out.data
    out = x.data + y.transpose(0, 2, 1).reshape(n, c, h, w)

    def backward(g, needs):
        gy = g.reshape(n, c, L).transpose(0, 2, 1)
        gwo = np.einsum("nlc,nld->cd", gy, o) if needs[3] else None
        gbo = gy.sum(axis=(0, 1)) if needs[4] else None
        go = (gy @ w_out.data).reshape(n, L, heads, d).transpose(0, 2, 1, 3)
        gp = go @ v.transpose(0, 1, 3, 2)
        gv = p.transpose(0, 1, 3, 2) @ go
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * scale
        gq = gs @ k
        gk = gs.transpose(0, 1, 3, 2) @ q
        gqkv = np.concatenate(
            [t.transpose(0, 2, 1, 3).reshape(n, L, c) for t in (gq, gk, gv)], axis=-1
        )
        gwqkv = np.einsum("nlk,nlc->kc", gqkv, tokens) if needs[1] else None
        gbqkv = gqkv.sum(axis=(0, 1)) if needs[2] else None
        gx = None
        if needs[0]:
            gtok = gqkv @ w_qkv.data
            gx = g + gtok.transpose(0, 2, 1).reshape(n, c, h, w)
        return gx, gwqkv, gbqkv, gwo, gbo

    return record(out, (x, w_qkv, b_qkv, w_out, b_out), backward)
