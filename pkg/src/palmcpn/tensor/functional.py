"""Differentiable operations on `Tensor`.

Every op computes its forward value with numpy and registers a backward
closure through `make_result`. Convolutions accumulate in 64-bit by default.
"""

from __future__ import annotations

import itertools
import math
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from .core import Parameter, Tensor, as_tensor, make_result

IntOrTuple = Union[int, Sequence[int]]

# soft cap on the number of elements materialized per convolution chunk
_CHUNK_ELEMENTS = 1 << 24


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _pair(a, b) -> Tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


# ------------------------------------------------------------------ elementwise
def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_result(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return make_result(out, (a, b), backward)


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data ** exponent

    def backward(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return make_result(out, (a,), backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return make_result(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return make_result(out, (a,), lambda g: (g * 0.5 / out,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_result(a.data * mask, (a,), lambda g: (g * mask,))


# ------------------------------------------------------------------ reductions
def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_result(np.asarray(out), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


# ---------------------------------------------------------------------- shapes
def reshape(a: Tensor, shape) -> Tensor:
    return make_result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def flatten(a: Tensor) -> Tensor:
    """Collapse every axis after the batch axis."""
    return reshape(a, (a.shape[0], -1))


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.data, axes)
    inverse = None if axes is None else np.argsort(axes)
    return make_result(out, (a,), lambda g: (np.transpose(g, inverse),))


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return make_result(np.array(out), (a,), backward)


def pad(a: Tensor, widths) -> Tensor:
    """Zero padding; ``widths`` follows `numpy.pad`."""
    widths = tuple((int(lo), int(hi)) for lo, hi in widths)
    out = np.pad(a.data, widths)
    index = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, a.shape))
    return make_result(out, (a,), lambda g: (g[index],))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(np.take(g, range(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return make_result(out, tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors], axis=axis)


# ---------------------------------------------------------------------- linear
def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make_result(a.data @ b.data, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` with weight shaped (out_features, in_features)."""
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear: input features {x.shape[-1]} != weight in_features {weight.shape[1]}")
    out = matmul(x, transpose(weight))
    return out if bias is None else add(out, bias)


# --------------------------------------------------------------- convolutions
def _tuple(v: IntOrTuple, n: int) -> Tuple[int, ...]:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * n
    v = tuple(int(i) for i in v)
    if len(v) != n:
        raise ValueError(f"expected {n} values, got {v}")
    return v


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _gather_columns(xl: np.ndarray, kernel, stride, out_sizes, lo: int, hi: int) -> np.ndarray:
    """im2col for output rows [lo, hi) of the first spatial axis.

    ``xl`` is the padded input in channels-last layout (N, *spatial, C). The
    result is (N, hi - lo, *out_sizes[1:], *kernel, C).
    """
    n, c = xl.shape[0], xl.shape[-1]
    sizes = (hi - lo,) + tuple(out_sizes[1:])
    cols = np.empty((n,) + sizes + tuple(kernel) + (c,), dtype=xl.dtype)
    nd = len(kernel)
    for offset in itertools.product(*(range(k) for k in kernel)):
        src = (slice(None),) + tuple(
            slice(off + st * start, off + st * (start + sz - 1) + 1, st)
            for off, st, start, sz in zip(offset, stride, (lo,) + (0,) * (nd - 1), sizes))
        cols[(slice(None),) + (slice(None),) * nd + offset] = xl[src]
    return cols


def _scatter_columns(gxl: np.ndarray, cols: np.ndarray, kernel, stride, lo: int) -> None:
    """Adjoint of `_gather_columns`: add column gradients back into ``gxl``."""
    nd = len(kernel)
    sizes = cols.shape[1:1 + nd]
    for offset in itertools.product(*(range(k) for k in kernel)):
        dst = (slice(None),) + tuple(
            slice(off + st * start, off + st * (start + sz - 1) + 1, st)
            for off, st, start, sz in zip(offset, stride, (lo,) + (0,) * (nd - 1), sizes))
        gxl[dst] += cols[(slice(None),) + (slice(None),) * nd + offset]


def _conv_nd(x: Tensor, w: Tensor, stride, padding, accumulate64: bool) -> Tensor:
    nd = w.ndim - 2
    if x.ndim != nd + 2:
        raise ValueError(f"conv: expected input with {nd + 2} dims, got shape {x.shape}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"conv: input channels {x.shape[1]} != kernel channels {w.shape[1]}")
    stride = _tuple(stride, nd)
    padding = _tuple(padding, nd)
    if min(stride) < 1:
        raise ValueError("conv: stride must be >= 1")
    kernel = w.shape[2:]
    spatial = x.shape[2:]
    out_sizes = tuple(conv_output_size(s, k, st, p) for s, k, st, p in zip(spatial, kernel, stride, padding))
    if min(out_sizes) < 1:
        raise ValueError(f"conv: kernel {kernel} does not fit padded input {spatial}")

    acc = np.float64 if accumulate64 else np.result_type(x.dtype, w.dtype)
    out_dtype = np.result_type(x.dtype, w.dtype)
    n, c = x.shape[:2]
    o = w.shape[0]
    k_total = int(np.prod(kernel)) * c
    xp = np.pad(x.data, ((0, 0), (0, 0)) + tuple((p, p) for p in padding))
    xl = np.ascontiguousarray(np.moveaxis(xp, 1, -1), dtype=acc)
    # (kernel..., C, O) flattened to match the column layout
    wl = np.ascontiguousarray(np.moveaxis(w.data, (0, 1), (-1, -2)), dtype=acc).reshape(k_total, o)

    per_row = n * int(np.prod(out_sizes[1:])) * k_total
    rows = max(1, _CHUNK_ELEMENTS // max(per_row, 1))
    chunks = [(lo, min(lo + rows, out_sizes[0])) for lo in range(0, out_sizes[0], rows)]

    out = np.empty((n, o) + out_sizes, dtype=out_dtype)
    needs_grad = x.requires_grad or w.requires_grad
    cached = None
    for lo, hi in chunks:
        cols = _gather_columns(xl, kernel, stride, out_sizes, lo, hi)
        res = cols.reshape(-1, k_total) @ wl
        out[:, :, lo:hi] = np.moveaxis(res.reshape((n, hi - lo) + out_sizes[1:] + (o,)), -1, 1)
        if needs_grad and len(chunks) == 1:
            cached = cols

    def backward(g):
        gl = np.ascontiguousarray(np.moveaxis(g, 1, -1), dtype=acc)
        gw = np.zeros((k_total, o), dtype=acc) if w.requires_grad else None
        gxl = np.zeros(xl.shape, dtype=acc) if x.requires_grad else None
        for lo, hi in chunks:
            g_rows = gl[:, lo:hi].reshape(-1, o)
            cols = cached if cached is not None else _gather_columns(xl, kernel, stride, out_sizes, lo, hi)
            if gw is not None:
                gw += cols.reshape(-1, k_total).T @ g_rows
            if gxl is not None:
                gcols = (g_rows @ wl.T).reshape(cols.shape)
                _scatter_columns(gxl, gcols, kernel, stride, lo)
        gx = gwt = None
        if gw is not None:
            gwt = np.moveaxis(gw.reshape(tuple(kernel) + (c, o)), (-1, -2), (0, 1)).astype(w.dtype)
        if gxl is not None:
            crop = (slice(None),) + tuple(slice(p, p + s) for p, s in zip(padding, spatial))
            gx = np.ascontiguousarray(np.moveaxis(gxl[crop], -1, 1)).astype(x.dtype)
        return gx, gwt

    return make_result(out, (x, w), backward)


def conv2d(x: Tensor, weight: Tensor, stride: IntOrTuple = 1, padding: IntOrTuple = 0,
           accumulate64: bool = True) -> Tensor:
    """2D cross-correlation. ``x`` is (C, H, W) or (N, C, H, W); weight (O, C, kh, kw)."""
    if weight.ndim != 4:
        raise ValueError(f"conv2d: weight must be (O, C, kh, kw), got {weight.shape}")
    if x.ndim == 3:
        out = _conv_nd(reshape(x, (1,) + x.shape), weight, stride, padding, accumulate64)
        return reshape(out, out.shape[1:])
    return _conv_nd(x, weight, stride, padding, accumulate64)


def conv3d(x: Tensor, weight: Tensor, stride: IntOrTuple = 1, padding: IntOrTuple = 0,
           accumulate64: bool = True) -> Tensor:
    """3D cross-correlation over (depth, height, width). ``x`` is (N, C, D, H, W)."""
    if weight.ndim != 5:
        raise ValueError(f"conv3d: weight must be (O, C, kd, kh, kw), got {weight.shape}")
    return _conv_nd(x, weight, stride, padding, accumulate64)


# --------------------------------------------------------------- normalization
def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over every axis but axis 1.

    In training mode the running buffers are updated in place with the
    unbiased batch variance.
    """
    c = x.shape[1]
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    if training:
        if x.shape[0] < 2:
            raise ValueError("batch_norm: training mode needs a batch of at least 2")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        count = x.data.size // c
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * count / max(count - 1, 1)
    else:
        mu, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(bshape)) * inv_std.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    out = out.astype(x.dtype, copy=False)

    def backward(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(bshape)
            if training:
                m = x.data.size // c
                gx = (inv_std.reshape(bshape) / m) * (
                    m * gxhat - gxhat.sum(axis=axes, keepdims=True)
                    - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True))
            else:
                gx = gxhat * inv_std.reshape(bshape)
            gx = gx.astype(x.dtype, copy=False)
        return gx, gg.astype(gamma.dtype), gb.astype(beta.dtype)

    return make_result(out, (x, gamma, beta), backward)


def max_pool_depth(x: Tensor) -> Tensor:
    """Max over the depth axis of (N, C, D, H, W), keeping D = 1.

    The gradient goes to a single element per column, the lowest depth index
    among ties.
    """
    if x.ndim != 5 or x.shape[2] < 1:
        raise ValueError(f"max_pool_depth: expected (N, C, D, H, W), got {x.shape}")
    idx = np.argmax(x.data, axis=2)[:, :, None]
    out = np.take_along_axis(x.data, idx, axis=2)

    def backward(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, idx, g, axis=2)
        return (full,)

    return make_result(out, (x,), backward)


# ----------------------------------------------------------- softmax and losses
def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), backward)


def _check_labels(labels, n_rows: int, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n_rows,):
        raise ValueError(f"labels must have shape ({n_rows},), got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    return labels.astype(np.int64)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    n, k = logits.shape
    labels = _check_labels(labels, n, k)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_p = z - log_norm
    loss = -log_p[np.arange(n), labels].mean()

    def backward(g):
        grad = np.exp(log_p)
        grad[np.arange(n), labels] -= 1.0
        return (grad * (g / n),)

    return make_result(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    norm = np.maximum(norm, eps)
    out = x.data / norm

    def backward(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return make_result(out, (x,), backward)


def arc_margin_logits(cosine: Tensor, labels, scale: float, margin: float,
                      target_only: bool = True) -> Tensor:
    """Scaled cosines with an additive angular margin.

    ``cos(theta + m)`` replaces the target-class cosine (or every cosine when
    ``target_only`` is False). Past ``theta + m > pi`` the penalty continues
    linearly as ``cos(theta) - m * sin(m)`` so the logit stays monotone in theta.
    """
    n, k = cosine.shape
    labels = _check_labels(labels, n, k)
    cos = np.clip(cosine.data, -1.0, 1.0)
    sin = np.sqrt(np.clip(1.0 - cos * cos, 0.0, None))
    cm, sm = math.cos(margin), math.sin(margin)
    shifted = cos * cm - sin * sm
    # d cos(theta + m) / d cos(theta) is unbounded at theta = 0; floor sin only there
    d_shifted = cm + cos * sm / np.maximum(sin, 1e-6)
    threshold = math.cos(math.pi - margin)
    fallback = cos <= threshold
    shifted = np.where(fallback, cos - margin * sm, shifted)
    d_shifted = np.where(fallback, 1.0, d_shifted)

    if target_only:
        mask = np.zeros_like(cos, dtype=bool)
        mask[np.arange(n), labels] = True
    else:
        mask = np.ones_like(cos, dtype=bool)
    out = scale * np.where(mask, shifted, cos)
    deriv = scale * np.where(mask, d_shifted, 1.0)

    return make_result(out.astype(cosine.dtype, copy=False), (cosine,), lambda g: (g * deriv,))
