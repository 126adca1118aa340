import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from palmcpn.tensor import (OptimizerState, Parameter, Tensor, cosine_lr, gradcheck, load_arrays,
                            no_grad, save_arrays, sgd_step)
from palmcpn.tensor import functional as F


def naive_conv2d(x, w, stride, pad):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for b in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ic in range(c):
                        for a in range(kh):
                            for bb in range(kw):
                                acc += xp[b, ic, i * stride + a, j * stride + bb] * w[oc, ic, a, bb]
                    out[b, oc, i, j] = acc
    return out


def naive_conv3d(x, w, stride, pad):
    n, c, d, h, wd = x.shape
    o, _, kd, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0)) + tuple((p, p) for p in pad))
    dims = [(s + 2 * p - k) // st + 1 for s, k, st, p in zip((d, h, wd), (kd, kh, kw), stride, pad)]
    out = np.zeros((n, o, *dims))
    for b in range(n):
        for oc in range(o):
            for i in range(dims[0]):
                for j in range(dims[1]):
                    for k in range(dims[2]):
                        acc = 0.0
                        for ic in range(c):
                            for a in range(kd):
                                for bb in range(kh):
                                    for cc in range(kw):
                                        acc += (xp[b, ic, i * stride[0] + a, j * stride[1] + bb,
                                                   k * stride[2] + cc] * w[oc, ic, a, bb, cc])
                        out[b, oc, i, j, k] = acc
    return out


# ------------------------------------------------------------------ conv2d
def test_conv2d_all_ones():
    x = Tensor(np.ones((1, 1, 3, 3)))
    w = Parameter(np.ones((1, 1, 3, 3)))
    out = F.conv2d(x, w)
    assert out.shape == (1, 1, 1, 1)
    assert out.data.item() == 9.0


def test_conv2d_identity_kernel():
    x = np.random.default_rng(1).normal(size=(2, 3, 5, 4))
    w = np.eye(3).reshape(3, 3, 1, 1)
    out = F.conv2d(Tensor(x), Tensor(w))
    np.testing.assert_array_equal(out.data, x)


def test_conv2d_unbatched_input():
    x = np.random.default_rng(2).normal(size=(1, 4, 4))
    w = np.random.default_rng(3).normal(size=(2, 1, 2, 2))
    out = F.conv2d(Tensor(x), Tensor(w), stride=2)
    assert out.shape == (2, 2, 2)
    np.testing.assert_allclose(out.data, naive_conv2d(x[None], w, 2, 0)[0], rtol=0, atol=1e-10)


@pytest.mark.parametrize("stride,pad", [(1, 0), (2, 1), (3, 2)])
def test_conv2d_matches_loop_oracle(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    x = rng.normal(size=(2, 3, 7, 6))
    w = rng.normal(size=(4, 3, 3, 2))
    out = F.conv2d(Tensor(x), Tensor(w), stride=stride, padding=pad)
    np.testing.assert_allclose(out.data, naive_conv2d(x, w, stride, pad), rtol=0, atol=1e-10)


def test_conv2d_float32_accumulates_in_float64():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(1, 2, 9, 9)).astype(np.float32)
    w = rng.normal(size=(3, 2, 5, 5)).astype(np.float32)
    out = F.conv2d(Tensor(x), Tensor(w), padding=2)
    assert out.dtype == np.float32
    ref = naive_conv2d(x.astype(np.float64), w.astype(np.float64), 1, 2)
    # a 64-bit accumulator leaves only the final rounding to float32
    np.testing.assert_allclose(out.data, ref.astype(np.float32), rtol=1e-6, atol=1e-6)


def test_conv2d_channel_mismatch():
    with pytest.raises(ValueError, match="channels"):
        F.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 2, 2))))


def test_conv2d_kernel_too_large():
    with pytest.raises(ValueError, match="fit"):
        F.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))


# ------------------------------------------------------------------ conv3d
def test_conv3d_all_ones():
    out = F.conv3d(Tensor(np.ones((1, 1, 2, 2, 2))), Tensor(np.ones((1, 1, 2, 2, 2))))
    assert out.data.item() == 8.0


def test_conv3d_depth_one_equals_conv2d():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(2, 3, 1, 6, 5))
    w = rng.normal(size=(4, 3, 1, 3, 3))
    out3 = F.conv3d(Tensor(x), Tensor(w), padding=(0, 1, 1))
    out2 = F.conv2d(Tensor(x[:, :, 0]), Tensor(w[:, :, 0]), padding=1)
    np.testing.assert_allclose(out3.data[:, :, 0], out2.data, atol=1e-12)


def test_conv3d_model_strides_match_oracle():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(1, 1, 4, 6, 6))
    w = rng.normal(size=(2, 1, 3, 3, 3))
    out = F.conv3d(Tensor(x), Tensor(w), stride=(2, 3, 3), padding=(1, 1, 1))
    assert out.shape == (1, 2, 2, 2, 2)
    np.testing.assert_allclose(out.data, naive_conv3d(x, w, (2, 3, 3), (1, 1, 1)), rtol=0, atol=1e-10)


def test_conv_chunking_is_transparent(monkeypatch):
    rng = np.random.default_rng(12)
    x = rng.normal(size=(2, 3, 5, 9, 8))
    w = rng.normal(size=(4, 3, 3, 3, 3))
    full = F.conv3d(Tensor(x), Tensor(w), stride=(1, 2, 1), padding=1)
    monkeypatch.setattr(F, "_CHUNK_ELEMENTS", 50)
    chunked = F.conv3d(Tensor(x), Tensor(w), stride=(1, 2, 1), padding=1)
    np.testing.assert_allclose(chunked.data, full.data, atol=1e-12)


# -------------------------------------------------------------- batch norm
def _bn(x, training=True, mean=None, var=None):
    c = x.shape[1]
    gamma, beta = Parameter(np.ones(c)), Parameter(np.zeros(c))
    rm = np.zeros(c) if mean is None else mean
    rv = np.ones(c) if var is None else var
    return F.batch_norm(Tensor(x), gamma, beta, rm, rv, training=training)


def test_batch_norm_constant_channel_is_zero():
    out = _bn(np.full((4, 2, 3, 3), 7.0))
    np.testing.assert_allclose(out.data, 0.0, atol=1e-12)


def test_batch_norm_eval_identity_stats():
    x = np.random.default_rng(0).normal(size=(3, 2, 4))
    out = _bn(x, training=False)
    np.testing.assert_allclose(out.data, x / math.sqrt(1 + 1e-5), rtol=1e-12)


def test_batch_norm_two_values():
    x = np.array([[1.0], [3.0]])
    out = _bn(x)
    np.testing.assert_allclose(out.data.ravel(), [-1.0, 1.0], atol=1e-5)


def test_batch_norm_statistics():
    x = np.random.default_rng(3).normal(3.0, 5.0, size=(8, 3, 5, 5))
    out = _bn(x).data
    axes = (0, 2, 3)
    assert np.all(np.abs(out.mean(axis=axes)) < 1e-5)
    assert np.all(np.abs(out.var(axis=axes) - 1) < 1e-4)


def test_batch_norm_batch_of_one_rejected():
    with pytest.raises(ValueError, match="at least 2"):
        _bn(np.ones((1, 2, 3)))


def test_batch_norm_updates_running_stats():
    x = np.random.default_rng(4).normal(2.0, 3.0, size=(6, 2, 10))
    rm, rv = np.zeros(2), np.ones(2)
    _bn(x, mean=rm, var=rv)
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2)))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2), ddof=1))


# ------------------------------------------------------- relu and max-pool
def test_max_pool_depth_identity_for_depth_one():
    x = np.random.default_rng(0).normal(size=(2, 3, 1, 4, 4))
    np.testing.assert_array_equal(F.max_pool_depth(Tensor(x)).data, x)


def test_max_pool_depth_spike():
    x = np.zeros((1, 1, 5, 2, 2))
    x[0, 0, 3, 1, 0] = 4.0
    x[0, 0, 1, 0, 1] = 2.5
    out = F.max_pool_depth(Tensor(x)).data[0, 0, 0]
    assert out[1, 0] == 4.0 and out[0, 1] == 2.5


def test_max_pool_depth_matches_loop_oracle():
    x = np.random.default_rng(9).normal(size=(1, 2, 4, 3, 3))
    out = F.max_pool_depth(Tensor(x)).data
    for c in range(2):
        for h in range(3):
            for w in range(3):
                assert out[0, c, 0, h, w] == max(x[0, c, d, h, w] for d in range(4))


def test_max_pool_depth_tie_goes_to_lowest_index():
    x = Tensor(np.ones((1, 1, 3, 1, 1)), requires_grad=True)
    F.max_pool_depth(x).sum().backward()
    np.testing.assert_array_equal(x.grad.ravel(), [1.0, 0.0, 0.0])


# -------------------------------------------------- softmax cross-entropy
def test_softmax_ce_uniform():
    loss = F.softmax_cross_entropy(Tensor(np.zeros((1, 2))), [0])
    assert loss.item() == pytest.approx(math.log(2), abs=1e-12)


def test_softmax_ce_saturates():
    loss = F.softmax_cross_entropy(Tensor(np.array([[200.0, 0.0]])), [0])
    assert loss.item() < 1e-12


def test_softmax_ce_direct_value():
    loss = F.softmax_cross_entropy(Tensor(np.array([[1.0, 2.0, 3.0]])), [2])
    expected = -math.log(math.exp(3) / (math.exp(1) + math.exp(2) + math.exp(3)))
    assert loss.item() == pytest.approx(expected, abs=1e-12)
    assert loss.item() == pytest.approx(0.40761, abs=1e-5)


def test_softmax_ce_bad_label():
    with pytest.raises(ValueError):
        F.softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=2, max_size=6), st.floats(-1e3, 1e3), st.data())
def test_softmax_ce_shift_invariant(logits, shift, data):
    label = data.draw(st.integers(0, len(logits) - 1))
    z = np.array([logits])
    a = F.softmax_cross_entropy(Tensor(z), [label]).item()
    b = F.softmax_cross_entropy(Tensor(z + shift), [label]).item()
    assert a >= 0
    assert abs(a - b) < 1e-9


# ---------------------------------------------------------------- backward
def test_backward_sum_and_square():
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, 1.0)
    x.grad = None
    (x * x).sum().backward()
    np.testing.assert_array_equal(x.grad, 2 * x.data)


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        (x * 2).backward()


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = (x * 2).sum()
    assert not y.requires_grad


def _rand(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


GRAD_CASES = {
    "conv2d": lambda r: ((x := _rand(r, 2, 2, 5, 5)), (w := _rand(r, 3, 2, 3, 3)),
                         lambda: (F.conv2d(x, w, stride=2, padding=1) ** 2).sum()),
    "conv3d": lambda r: ((x := _rand(r, 2, 2, 4, 6, 6)), (w := _rand(r, 2, 2, 3, 3, 3)),
                         lambda: (F.conv3d(x, w, stride=(2, 3, 3), padding=1) ** 2).sum()),
    "batch_norm": lambda r: ((x := _rand(r, 4, 3, 5)), (g := _rand(r, 3)), (b := _rand(r, 3)),
                             lambda: (F.batch_norm(x, g, b, np.zeros(3), np.ones(3), True) ** 3).sum()),
    "linear": lambda r: ((x := _rand(r, 4, 5)), (w := _rand(r, 3, 5)), (b := _rand(r, 3)),
                         lambda: (F.linear(x, w, b) ** 2).sum()),
    "softmax_ce": lambda r: ((z := _rand(r, 4, 5)), lambda: F.softmax_cross_entropy(z, [0, 4, 2, 2])),
    "softmax": lambda r: ((z := _rand(r, 3, 9)), lambda: (F.softmax(z) * Tensor(np.arange(9.0))).sum()),
    "l2_normalize": lambda r: ((z := _rand(r, 3, 4)),
                               lambda: (F.l2_normalize(z) * Tensor(np.arange(12.0).reshape(3, 4))).sum()),
    "arc_margin": lambda r: ((c := Tensor(r.uniform(-0.9, 0.9, size=(4, 3)), requires_grad=True)),
                             lambda: F.softmax_cross_entropy(F.arc_margin_logits(c, [0, 1, 2, 0], 16, 0.5),
                                                             [0, 1, 2, 0])),
    "relu_maxpool": lambda r: ((x := _rand(r, 1, 2, 4, 3, 3)),
                               lambda: (F.max_pool_depth(F.relu(x)) ** 2).sum()),
    "pad_getitem_reshape": lambda r: ((x := _rand(r, 2, 3, 4)),
                                      lambda: (F.pad(x, ((0, 0), (1, 2), (0, 1)))[:, 1:4].reshape(2, -1) ** 2).sum()),
    "elementwise": lambda r: ((a := _rand(r, 3, 4)), (b := Tensor(r.uniform(1, 2, size=(1, 4)), requires_grad=True)),
                              lambda: ((a * b - a / b + (b ** 0.5)).exp().mean() + F.sqrt(b).log().sum())),
    "concat_stack": lambda r: ((a := _rand(r, 2, 3)), (b := _rand(r, 2, 3)),
                               lambda: (F.stack([a, b], axis=1) ** 2).sum() + (F.concat([a, b], 0) ** 3).sum()),
}


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_gradcheck_each_op(name):
    *inputs, fn = GRAD_CASES[name](np.random.default_rng(42))
    result = gradcheck(fn, inputs, h=1e-5)
    assert result.checked > 0
    assert result.max_rel_error < 1e-4, result


# --------------------------------------------------------------- optimizer
def test_cosine_schedule_values():
    assert cosine_lr(0) == pytest.approx(1e-2)
    assert cosine_lr(150) == pytest.approx(1e-4)
    assert cosine_lr(75) == pytest.approx(5.05e-3, rel=1e-12)
    lrs = [cosine_lr(t) for t in np.linspace(0, 150, 301)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert all(1e-4 - 1e-15 <= v <= 1e-2 + 1e-15 for v in lrs)


def test_sgd_momentum_and_decay():
    p = Parameter(np.array([1.0, -1.0]))
    state = OptimizerState(momentum_coefficient=0.9, weight_decay=0.1)
    p.grad = np.array([0.5, 0.5])
    sgd_step([p], state, lr=0.1)
    # v = g + wd * p
    np.testing.assert_allclose(p.data, [1.0 - 0.1 * 0.6, -1.0 - 0.1 * 0.4])
    p.grad = np.array([0.5, 0.5])
    v_prev = np.array([0.6, 0.4])
    v = 0.9 * v_prev + (0.5 + 0.1 * np.array([0.94, -1.04]))
    sgd_step([p], state, lr=0.1)
    np.testing.assert_allclose(p.data, np.array([0.94, -1.04]) - 0.1 * v)


def test_frozen_parameter_is_untouched():
    frozen = Parameter(np.random.default_rng(0).normal(size=(3, 3)), frozen=True)
    live = Parameter(np.ones(3))
    before = frozen.data.copy()
    state = OptimizerState()
    for _ in range(10):
        live.grad = np.ones(3)
        frozen.grad = np.ones((3, 3))  # even a stray gradient must be ignored
        sgd_step([frozen, live], state, lr=0.5)
    assert frozen.data.tobytes() == before.tobytes()
    assert not np.allclose(live.data, 1.0)


# -------------------------------------------------------------- checkpoint
def test_checkpoint_round_trip(tmp_path):
    arrays = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "conv.w": np.ones((1, 2, 3, 4), np.float32),
              "scalar": np.array(2.5, np.float32)}
    save_arrays(tmp_path / "x.ckpt", arrays, meta={"k": [1, 2]})
    loaded, meta = load_arrays(tmp_path / "x.ckpt")
    assert meta == {"k": [1, 2]}
    assert list(loaded) == list(arrays)
    for k in arrays:
        assert loaded[k].dtype == np.float32
        np.testing.assert_array_equal(loaded[k], arrays[k])


def test_checkpoint_layout_is_little_endian(tmp_path):
    save_arrays(tmp_path / "x.ckpt", {"w": np.array([1.0], np.float32)})
    raw = (tmp_path / "x.ckpt").read_bytes()
    assert raw[:4] == b"PCKP"
    assert raw.endswith(np.array([1.0], "<f4").tobytes())
