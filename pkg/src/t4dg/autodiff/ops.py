"""Differentiable primitives.

All functions accept Tensors or array-likes and broadcast like numpy.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, make_node

NEG_INF = -np.inf


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _wrap(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x))


# -- elementwise arithmetic --------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data + b.data
    return make_node(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data - b.data
    return make_node(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data * b.data
    return make_node(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data / b.data

    def bw(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return make_node(out, (a, b), bw)


def neg(a) -> Tensor:
    a = _wrap(a)
    return make_node(-a.data, (a,), lambda g: (-g,))


def scale(a, s: float) -> Tensor:
    a = _wrap(a)
    s = a.data.dtype.type(s)
    return make_node(a.data * s, (a,), lambda g: (g * s,))


def square(a) -> Tensor:
    a = _wrap(a)
    return make_node(a.data * a.data, (a,), lambda g: (2 * a.data * g,))


def sqrt(a) -> Tensor:
    a = _wrap(a)
    out = np.sqrt(a.data)
    return make_node(out, (a,), lambda g: (g * 0.5 / out,))


def exp(a) -> Tensor:
    a = _wrap(a)
    out = np.exp(a.data)
    return make_node(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _wrap(a)
    return make_node(np.log(a.data), (a,), lambda g: (g / a.data,))


def sin(a) -> Tensor:
    a = _wrap(a)
    return make_node(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def cos(a) -> Tensor:
    a = _wrap(a)
    return make_node(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),))


def tanh(a) -> Tensor:
    a = _wrap(a)
    out = np.tanh(a.data)
    return make_node(out, (a,), lambda g: (g * (1 - out * out),))


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    x = a.data
    out = np.where(x >= 0, 1 / (1 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1 + np.exp(-np.abs(x))))
    out = out.astype(x.dtype, copy=False)
    return make_node(out, (a,), lambda g: (g * out * (1 - out),))


def softplus(a) -> Tensor:
    a = _wrap(a)
    x = a.data
    out = (np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))).astype(x.dtype, copy=False)

    def bw(g):
        s = np.where(x >= 0, 1 / (1 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1 + np.exp(-np.abs(x))))
        return (g * s.astype(x.dtype, copy=False),)

    return make_node(out, (a,), bw)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """tanh approximation of GELU."""
    a = _wrap(a)
    x = a.data
    u = _GELU_C * (x + 0.044715 * x**3)
    th = np.tanh(u)
    out = 0.5 * x * (1 + th)

    def bw(g):
        du = _GELU_C * (1 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1 + th) + 0.5 * x * (1 - th * th) * du),)

    return make_node(out, (a,), bw)


def relu(a) -> Tensor:
    a = _wrap(a)
    mask = a.data > 0
    return make_node(a.data * mask, (a,), lambda g: (g * mask,))


def clip(a, lo=None, hi=None) -> Tensor:
    """Clamp values; gradient is zero where the clamp is active."""
    a = _wrap(a)
    out = np.clip(a.data, lo, hi)
    inside = out == a.data
    return make_node(out, (a,), lambda g: (g * inside,))


def abs(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = _wrap(a)
    sgn = np.sign(a.data)
    return make_node(np.abs(a.data), (a,), lambda g: (g * sgn,))


def where(cond: np.ndarray, a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, a.data, b.data)
    return make_node(
        out,
        (a, b),
        lambda g: (_unbroadcast(np.where(cond, g, 0), a.shape), _unbroadcast(np.where(cond, 0, g), b.shape)),
    )


# -- linear algebra ----------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching rules; 2-D is the base case."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands with at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make_node(out, (a, b), bw)


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = _wrap(a)
    return make_node(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def permute(a, axes: Sequence[int]) -> Tensor:
    a = _wrap(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _wrap(a)
    src = a.shape
    return make_node(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


# -- reductions --------------------------------------------------------------

def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _wrap(a)
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_node(out, (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# -- structure ----------------------------------------------------------------

def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_node(out, ts, bw)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return make_node(out, ts, bw)


def getitem(a, idx) -> Tensor:
    """Basic or advanced indexing; the backward scatters with accumulation."""
    a = _wrap(a)
    if isinstance(idx, Tensor):
        idx = idx.data
    out = a.data[idx]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)

    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return make_node(out, (a,), bw)


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis or i is None for i in items)


def pad_last(a, before: int, after: int) -> Tensor:
    a = _wrap(a)
    width = [(0, 0)] * (a.ndim - 1) + [(before, after)]
    out = np.pad(a.data, width)
    n = a.shape[-1]
    return make_node(out, (a,), lambda g: (g[..., before : before + n],))


# -- normalization and softmax -------------------------------------------------

def layer_norm(x, weight=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply optional affine."""
    x = _wrap(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd

    def bw(g):
        n = x.shape[-1]
        gx = rstd / n * (n * g - g.sum(-1, keepdims=True) - xhat * (g * xhat).sum(-1, keepdims=True))
        return (gx,)

    out = make_node(xhat.astype(x.dtype, copy=False), (x,), bw)
    if weight is not None:
        out = mul(out, weight)
    if bias is not None:
        out = add(out, bias)
    return out


def softmax_lastdim(x, additive_mask=None) -> Tensor:
    """Max-subtracted softmax over the final axis.

    ``additive_mask`` holds 0 for kept entries and -inf for removed ones and
    must broadcast against ``x``. A row with every entry removed raises.
    """
    x = _wrap(x)
    logits = x.data
    if additive_mask is not None:
        m = additive_mask.data if isinstance(additive_mask, Tensor) else np.asarray(additive_mask)
        logits = logits + m.astype(logits.dtype, copy=False)
    mx = logits.max(axis=-1, keepdims=True)
    if not np.all(np.isfinite(mx)):
        raise ValueError("softmax row has no unmasked entry")
    e = np.exp(logits - mx)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(-1, keepdims=True)),)

    return make_node(out, (x,), bw)


# -- losses --------------------------------------------------------------------

def mse(a, b) -> Tensor:
    d = sub(a, b)
    return mean(mul(d, d))


def masked_mean(a, weights: np.ndarray) -> Tensor:
    """Weighted mean with non-differentiable weights (broadcast to ``a``)."""
    a = _wrap(a)
    w = np.broadcast_to(np.asarray(weights, dtype=a.dtype), a.shape)
    total = w.sum()
    if total <= 0:
        raise ValueError("masked_mean with zero total weight")
    return scale(sum(mul(a, Tensor(w, dtype=a.dtype.type))), 1.0 / total)
