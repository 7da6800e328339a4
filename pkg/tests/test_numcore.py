import math

import numpy as np
import pytest

from flowfuse import numcore as nc
from flowfuse.numcore.gradcheck import check_gradients


def naive_conv(x, w, b=None, stride=1, padding=0):
    n, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for a in range(n):
        for o in range(cout):
            for y in range(ho):
                for z in range(wo):
                    acc = 0.0
                    for c in range(cin):
                        for i in range(k):
                            for j in range(k):
                                acc += xp[a, c, y * stride + i, z * stride + j] * w[o, c, i, j]
                    out[a, o, y, z] = acc + (0.0 if b is None else b[o])
    return out


def t(a, grad=False):
    return nc.tensor(a, requires_grad=grad)


# -- conv2d ----------------------------------------------------------------

def test_conv_box_sum_of_ones():
    out = nc.conv2d(t(np.ones((1, 1, 3, 3))), t(np.ones((1, 1, 3, 3))), padding=1).data
    assert out[0, 0, 1, 1] == 9
    assert out[0, 0, 0, 0] == 4
    assert out[0, 0, 0, 1] == 6


def test_conv_identity_kernel():
    x = np.random.default_rng(0).standard_normal((2, 3, 5, 5))
    w = np.zeros((3, 3, 1, 1))
    w[np.arange(3), np.arange(3)] = 1
    np.testing.assert_array_equal(nc.conv2d(t(x), t(w)).data, t(x).data)


@pytest.mark.parametrize("stride,padding", [(1, 1), (1, 0), (2, 1)])
def test_conv_matches_loop_oracle(stride, padding):
    rng = np.random.default_rng(stride * 10 + padding)
    x = rng.standard_normal((2, 3, 8, 8))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    expected = naive_conv(x, w, b, stride, padding)
    for algo in ("im2col", "direct"):
        got = nc.conv2d(t(x), t(w), t(b), stride=stride, padding=padding, algorithm=algo).data
        np.testing.assert_allclose(got, expected, atol=1e-5, rtol=0)


def test_conv_algorithms_agree():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((3, 5, 12, 10))
    w = rng.standard_normal((7, 5, 5, 5)) / math.sqrt(5 * 5 * 5)
    a = nc.conv2d(t(x), t(w), padding=2).data
    b = nc.conv2d(t(x), t(w), padding=2, algorithm="direct").data
    np.testing.assert_allclose(a, b, atol=1e-5)


def test_conv_linearity():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 3, 6, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    with nc.precision(np.float64):
        lhs = nc.conv2d(nc.tensor(2.5 * x), nc.tensor(w), padding=1).data
        rhs = 2.5 * nc.conv2d(nc.tensor(x), nc.tensor(w), padding=1).data
    np.testing.assert_allclose(lhs, rhs, rtol=1e-6)


def test_conv_shape_errors():
    with pytest.raises(ValueError, match="channel mismatch"):
        nc.conv2d(t(np.ones((1, 2, 4, 4))), t(np.ones((1, 3, 3, 3))))
    with pytest.raises(ValueError, match="odd"):
        nc.conv2d(t(np.ones((1, 1, 4, 4))), t(np.ones((1, 1, 2, 2))))
    with pytest.raises(ValueError, match="smaller than kernel"):
        nc.conv2d(t(np.ones((1, 1, 2, 2))), t(np.ones((1, 1, 3, 3))))


def test_conv_non_finite_output_raises():
    x = np.ones((1, 1, 3, 3))
    x[0, 0, 1, 1] = np.inf
    with pytest.raises(nc.NumericError):
        nc.conv2d(t(x), t(np.ones((1, 1, 3, 3))), padding=1)


def test_conv_output_size():
    out = nc.conv2d(t(np.zeros((1, 2, 9, 7))), t(np.zeros((3, 2, 3, 3))), stride=2, padding=1)
    assert out.shape == (1, 3, 5, 4)


# -- group norm ------------------------------------------------------------

def test_group_norm_constant_input_is_zero():
    out = nc.group_norm(t(np.full((2, 4, 3, 3), 7.0)), 2, t(np.ones(4)), t(np.zeros(4)))
    np.testing.assert_array_equal(out.data, 0.0)


def test_group_norm_zero_gamma_gives_beta():
    x = np.random.default_rng(0).standard_normal((2, 4, 3, 3))
    beta = np.array([1.0, -2.0, 0.5, 3.0])
    out = nc.group_norm(t(x), 2, t(np.zeros(4)), t(beta)).data
    np.testing.assert_array_equal(out, np.broadcast_to(beta.reshape(1, 4, 1, 1), out.shape))


def test_group_norm_statistics():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 8, 4, 4)) * 3 + 1
    eps = 1e-5
    out = nc.group_norm(t(x), 4, t(np.ones(8)), t(np.zeros(8)), eps=eps).data
    for n in range(2):
        for g in range(4):
            block = x[n, 2 * g : 2 * g + 2]
            ref = (block - block.mean()) / math.sqrt(block.var() + eps)
            np.testing.assert_allclose(out[n, 2 * g : 2 * g + 2], ref, atol=1e-5)
            assert abs(out[n, 2 * g : 2 * g + 2].mean()) < 1e-5


def test_group_norm_errors():
    with pytest.raises(ValueError):
        nc.group_norm(t(np.ones((1, 6, 2, 2))), 4, t(np.ones(6)), t(np.zeros(6)))
    with pytest.raises(ValueError):
        nc.group_norm(t(np.ones((1, 4, 2, 2))), 2, t(np.ones(4)), t(np.zeros(4)), eps=0)


# -- attention -------------------------------------------------------------

def _attn_params(rng, c, zero_out=False):
    wqkv = rng.standard_normal((3 * c, c)) * 0.5
    bqkv = rng.standard_normal(3 * c) * 0.1
    wo = np.zeros((c, c)) if zero_out else rng.standard_normal((c, c)) * 0.5
    bo = np.zeros(c) if zero_out else rng.standard_normal(c) * 0.1
    return wqkv, bqkv, wo, bo


def test_attention_zero_projection_is_identity():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 4, 3, 3))
    out = nc.self_attention(t(x), 2, *map(t, _attn_params(rng, 4, zero_out=True)))
    np.testing.assert_array_equal(out.data, t(x).data)


def test_attention_single_token_returns_value():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 4, 1, 1))
    wqkv, bqkv, wo, bo = _attn_params(rng, 4)
    out = nc.self_attention(t(x), 2, t(wqkv), t(bqkv), t(wo), t(bo)).data
    tok = x.reshape(4)
    value = wqkv[8:] @ tok + bqkv[8:]
    np.testing.assert_allclose(out.reshape(4), tok + wo @ value + bo, atol=1e-5)


def test_attention_matches_explicit_matrices():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((1, 4, 2, 2))
    wqkv, bqkv, wo, bo = _attn_params(rng, 4)
    X = x.reshape(4, 4).T  # tokens x channels
    Q = X @ wqkv[:4].T + bqkv[:4]
    K = X @ wqkv[4:8].T + bqkv[4:8]
    V = X @ wqkv[8:].T + bqkv[8:]
    S = Q @ K.T / 2.0
    P = np.exp(S) / np.exp(S).sum(axis=1, keepdims=True)
    np.testing.assert_allclose(P.sum(axis=1), 1.0)
    Y = X + (P @ V) @ wo.T + bo
    out = nc.self_attention(t(x), 1, t(wqkv), t(bqkv), t(wo), t(bo)).data
    np.testing.assert_allclose(out.reshape(4, 4).T, Y, atol=1e-5)


def test_attention_head_error():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        nc.self_attention(t(np.ones((1, 6, 2, 2))), 4, *map(t, _attn_params(rng, 6)))


# -- tape ------------------------------------------------------------------

def test_backward_of_sum_is_ones():
    x = t(np.random.default_rng(0).standard_normal((2, 3, 4)), grad=True)
    with nc.Tape() as tape:
        loss = nc.sum(x)
    np.testing.assert_array_equal(tape.backward(loss)[x], 1.0)


def test_backward_quadratic():
    rng = np.random.default_rng(0)
    xv, yv = rng.standard_normal((3, 5)), rng.standard_normal((3, 5))
    with nc.precision(np.float64):
        x = nc.tensor(xv, requires_grad=True)
        with nc.Tape() as tape:
            loss = nc.mul_scalar(nc.mse(x, nc.tensor(yv)), 0.5 * xv.size)
        np.testing.assert_allclose(tape.backward(loss)[x], xv - yv, rtol=1e-12)


def test_backward_scalar_chain_exact():
    with nc.precision(np.float64):
        x = nc.tensor(np.array(1.5), requires_grad=True)
        with nc.Tape() as tape:
            loss = nc.mul_scalar(nc.mul_scalar(x, 3.0), 0.25)
        assert tape.backward(loss)[x] == 0.75


def test_backward_twice_raises():
    x = t(np.ones(3), grad=True)
    with nc.Tape() as tape:
        loss = nc.sum(x)
    tape.backward(loss)
    with pytest.raises(RuntimeError):
        tape.backward(loss)


def test_backward_requires_scalar():
    x = t(np.ones(3), grad=True)
    with nc.Tape() as tape:
        y = nc.silu(x)
    with pytest.raises(ValueError):
        tape.backward(y)


def test_leaves_without_grad_not_materialized():
    a = t(np.ones((2, 2)), grad=True)
    b = t(np.ones((2, 2)))
    with nc.Tape() as tape:
        loss = nc.sum(nc.add(a, b))
    grads = tape.backward(loss)
    assert a in grads and b not in grads


def test_no_recording_without_tape():
    a = t(np.ones(2), grad=True)
    out = nc.silu(a)
    assert not out.requires_grad


def test_reverse_order_replay():
    order = []
    a = t(np.ones(2), grad=True)
    with nc.Tape() as tape:
        h = nc.mul_scalar(a, 2.0)
        h = nc.silu(h)
        loss = nc.sum(h)
    fns = [e[2] for e in tape._entries]
    for i, (out, inputs, fn) in enumerate(tape._entries):
        def wrapped(g, needs, fn=fn, i=i):
            order.append(i)
            return fn(g, needs)
        tape._entries[i] = (out, inputs, wrapped)
    tape.backward(loss)
    assert order == list(reversed(range(len(fns))))


def test_forward_determinism():
    rng = np.random.default_rng(5)
    x, w = rng.standard_normal((2, 3, 8, 8)), rng.standard_normal((4, 3, 3, 3))
    a = nc.conv2d(t(x), t(w), padding=1).data
    b = nc.conv2d(t(x), t(w), padding=1).data
    assert a.tobytes() == b.tobytes()


# -- gradient property suite -------------------------------------------------

def _shape(rng, lo=2, hi=5):
    return int(rng.integers(lo, hi))


def _cases(seed):
    rng = np.random.default_rng(seed)
    n, c, h, w = 1 + seed % 2, 2 * _shape(rng, 1, 3), _shape(rng, 3, 6), _shape(rng, 3, 6)
    cout = _shape(rng, 1, 4)
    k = 1 if seed == 4 else 3
    stride = 2 if seed == 2 else 1
    x = rng.standard_normal((n, c, h, w))
    return {
        "conv2d": (
            lambda x, wt, b: nc.conv2d(x, wt, b, stride=stride, padding=k // 2),
            [x, rng.standard_normal((cout, c, k, k)) * 0.5, rng.standard_normal(cout)],
        ),
        "group_norm": (
            lambda x, g, b: nc.group_norm(x, 2, g, b),
            [x, rng.standard_normal(c), rng.standard_normal(c)],
        ),
        "self_attention": (
            lambda x, a, b, o, ob: nc.self_attention(x, 2, a, b, o, ob),
            [x, *_attn_params(rng, c)],
        ),
        "linear": (
            nc.linear,
            [rng.standard_normal((n + 1, c)), rng.standard_normal((cout, c)), rng.standard_normal(cout)],
        ),
        "silu": (nc.silu, [x * 2]),
        "add": (nc.add, [x, rng.standard_normal((1, c, 1, 1))]),
        "scale_shift": (nc.scale_shift, [x, rng.standard_normal((x.shape[0], 2 * c))]),
        "concat": (lambda a, b: nc.concat([a, b], axis=1), [x, rng.standard_normal(x.shape)]),
        "upsample": (nc.upsample_nearest, [x]),
        "mean": (lambda a: nc.reshape(nc.mean(a), (1,)), [x]),
        "mse": (lambda a, b: nc.reshape(nc.mse(a, b), (1,)), [x, rng.standard_normal(x.shape)]),
    }


PRIMITIVES = list(_cases(0))


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("name", PRIMITIVES)
def test_primitive_gradients_float64(name, seed):
    fn, inputs = _cases(seed)[name]
    errs = check_gradients(fn, inputs, dtype=np.float64, eps=1e-6)
    assert max(errs) <= 1e-6, errs


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("name", PRIMITIVES)
def test_primitive_gradients_float32(name, seed):
    fn, inputs = _cases(seed)[name]
    errs = check_gradients(fn, inputs, dtype=np.float32, eps=1e-3, mode="directional")
    assert max(errs) <= 1e-3, errs


def test_scale_shift_closed_form():
    x = np.arange(8.0).reshape(1, 2, 2, 2)
    out = nc.scale_shift(nc.tensor(x), nc.tensor(np.array([[1.0, -1.0, 0.5, 2.0]]))).data
    np.testing.assert_allclose(out[0, 0], 2 * x[0, 0] + 0.5)
    np.testing.assert_allclose(out[0, 1], np.full((2, 2), 2.0))
    with pytest.raises(ValueError):
        nc.scale_shift(nc.tensor(x), nc.tensor(np.zeros((1, 3))))
