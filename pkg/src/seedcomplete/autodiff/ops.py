"""Differentiable primitives.

Shapes must match exactly for elementwise binary ops (Python scalars are the
only thing that broadcasts). Channel-wise bias and affine terms are handled
inside the ops that need them.
"""
from __future__ import annotations

import builtins
from itertools import product
from typing import Sequence

import numpy as np

from .tensor import Tensor, as_tensor, make_result

__all__ = [
    "add", "sub", "mul", "div", "neg", "exp", "log", "relu", "sigmoid", "clamp",
    "sum", "mean", "reshape", "transpose", "concat", "getitem", "pad",
    "gather_columns", "scatter_columns", "matmul", "linear", "column_linear", "weighted_sum",
    "softmax", "log_softmax", "conv2d", "conv3d", "conv1d_axis",
    "instance_norm", "layer_norm", "upsample_nearest", "sparse_matmul",
]

AXES = {"x": 0, "y": 1, "z": 2}


def _scalar_like(c, t: Tensor):
    return t.dtype.type(c)


def _check_same(a: Tensor, b: Tensor, name: str):
    if a.shape != b.shape:
        raise ValueError(f"{name}: shape mismatch {a.shape} vs {b.shape} (no implicit broadcasting)")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        return make_result(a.data + _scalar_like(b, a), (a,), lambda g: (g,), "add_scalar")
    if not isinstance(a, Tensor):
        return add(b, a)
    _check_same(a, b, "add")
    return make_result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -b)
    if not isinstance(a, Tensor):
        return add(neg(b), a)
    _check_same(a, b, "sub")
    return make_result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        c = _scalar_like(b, a)
        return make_result(a.data * c, (a,), lambda g: (g * c,), "mul_scalar")
    if not isinstance(a, Tensor):
        return mul(b, a)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return make_result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return mul(a, 1.0 / b)
    if not isinstance(a, Tensor):
        c = _scalar_like(a, b)
        bd = b.data
        return make_result(c / bd, (b,), lambda g: (-g * c / (bd * bd),), "rdiv_scalar")
    _check_same(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = g / bd
        return ga, -ga * out

    return make_result(out, (a, b), backward, "div")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return make_result(np.log(ad), (a,), lambda g: (g / ad,), "log")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    return make_result(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    x = a.data
    inside = (x >= lo) & (x <= hi)
    out = np.clip(x, _scalar_like(lo, a), _scalar_like(hi, a))
    return make_result(out, (a,), lambda g: (g * inside,), "clamp")


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ValueError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    return tuple(out)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    out = np.sum(a.data, axis=axes, keepdims=keepdims)
    shape = a.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return make_result(np.asarray(out, dtype=a.dtype), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return mul(sum(a, axis=axes, keepdims=keepdims), 1.0 / builtins.max(n, 1))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    out = a.data.reshape(shape)
    return make_result(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat of an empty list")
    axis = _norm_axis(axis, tensors[0].ndim)[0]
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != axis
        ):
            raise ValueError(f"concat: incompatible shapes {tensors[0].shape} and {t.shape} on axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def backward(g):
        res = []
        for i in range(len(tensors)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(bounds[i], bounds[i + 1])
            res.append(g[tuple(sl)])
        return res

    return make_result(out, tensors, backward, "concat")


def _is_basic(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]
    shape, dtype = a.shape, a.dtype
    basic = _is_basic(index)

    def backward(g):
        ga = np.zeros(shape, dtype=dtype)
        if basic:
            ga[index] += g
        else:
            np.add.at(ga, index, g)
        return (ga,)

    return make_result(np.array(out, dtype=dtype), (a,), backward, "getitem")


def pad(a: Tensor, pad_width) -> Tensor:
    """Zero padding; ``pad_width`` as in ``np.pad``."""
    pad_width = [tuple(p) for p in pad_width]
    out = np.pad(a.data, pad_width)
    sl = tuple(slice(lo, lo + n) for (lo, _), n in zip(pad_width, a.shape))
    return make_result(out, (a,), lambda g: (g[sl],), "pad")


# ---------------------------------------------------------------------------
# gather / scatter along the trailing (column) axis
# ---------------------------------------------------------------------------

def gather_columns(a: Tensor, index) -> Tensor:
    """``out[c, ...] = a[c, index[...]]``; index -1 reads a zero column."""
    if a.ndim != 2:
        raise ValueError(f"gather_columns expects a 2-d [C, M] tensor, got {a.shape}")
    index = np.asarray(index, dtype=np.int64)
    C, M = a.shape
    if index.size and (index.max() >= M or index.min() < -1):
        bad = int(np.flatnonzero((index.reshape(-1) >= M) | (index.reshape(-1) < -1))[0])
        raise IndexError(f"gather_columns: index {int(index.reshape(-1)[bad])} at position {bad} out of range for {M} columns")
    flat = index.reshape(-1)
    missing = flat < 0
    if missing.any():
        padded = np.concatenate([a.data, np.zeros((C, 1), a.dtype)], axis=1)
        safe = np.where(missing, M, flat)
        out = padded[:, safe]
    else:
        safe = flat
        out = a.data[:, flat]
    out = out.reshape((C,) + index.shape)

    def backward(g):
        g2 = g.reshape(C, -1)
        keep = ~missing
        return (_scatter_add(g2[:, keep], flat[keep], M),)

    return make_result(out, (a,), backward, "gather_columns")


def _scatter_add(cols: np.ndarray, idx: np.ndarray, m: int) -> np.ndarray:
    C = cols.shape[0]
    out = np.zeros((C, m), dtype=cols.dtype)
    if idx.size == 0:
        return out
    order = np.argsort(idx, kind="stable")
    s = idx[order]
    starts = np.flatnonzero(np.concatenate([[True], s[1:] != s[:-1]]))
    if len(starts) == idx.size:
        out[:, idx] = cols
    else:
        # stable sort + reduceat keeps the summation order fixed
        out[:, s[starts]] = np.add.reduceat(cols[:, order], starts, axis=1)
    return out


def scatter_columns(a: Tensor, index, size: int) -> Tensor:
    """Adjoint of :func:`gather_columns`: sum column ``i`` into ``out[:, index[i]]``."""
    if a.ndim != 2:
        raise ValueError(f"scatter_columns expects a 2-d [C, N] tensor, got {a.shape}")
    index = np.asarray(index, dtype=np.int64).reshape(-1)
    if index.size != a.shape[1]:
        raise ValueError(f"scatter_columns: {index.size} indices for {a.shape[1]} columns")
    if index.size and (index.max() >= size or index.min() < 0):
        raise IndexError(f"scatter_columns: index out of range for {size} columns")
    out = _scatter_add(a.data, index, size)
    return make_result(out, (a,), lambda g: (g[:, index],), "scatter_columns")


# ---------------------------------------------------------------------------
# linear maps
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return make_result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map over the last axis; leading axes are batch axes."""
    cout, cin = weight.shape
    if x.shape[-1] != cin:
        raise ValueError(f"linear: input has {x.shape[-1]} features, weight expects {cin}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, cin)
    wd = weight.data
    out = x2 @ wd.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(lead + (cout,))

    def backward(g):
        g2 = g.reshape(-1, cout)
        res = [(g2 @ wd).reshape(x.shape), g2.T @ x2]
        if bias is not None:
            res.append(g2.sum(0))
        return res

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward, "linear")


def column_linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``weight @ x + bias`` for a channel-major [C, N] matrix."""
    cout, cin = weight.shape
    if x.ndim != 2 or x.shape[0] != cin:
        raise ValueError(f"column_linear: input {x.shape} vs weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = wd @ xd
    if bias is not None:
        out += bias.data[:, None]

    def backward(g):
        res = [wd.T @ g, g @ xd.T]
        if bias is not None:
            res.append(g.sum(1))
        return res

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward, "column_linear")


def weighted_sum(weights: Tensor, tensors: Sequence[Tensor]) -> Tensor:
    """``sum_k weights[k] * tensors[k]`` for same-shape tensors."""
    tensors = list(tensors)
    if weights.shape != (len(tensors),):
        raise ValueError(f"weighted_sum: {weights.shape} weights for {len(tensors)} tensors")
    for t in tensors[1:]:
        _check_same(tensors[0], t, "weighted_sum")
    w = weights.data
    out = np.zeros_like(tensors[0].data)
    for k, t in enumerate(tensors):
        out = out + w[k] * t.data

    def backward(g):
        gw = np.array([np.sum(g * t.data) for t in tensors], dtype=w.dtype)
        return [gw] + [g * w[k] for k in range(len(tensors))]

    return make_result(out, [weights] + tensors, backward, "weighted_sum")


def sparse_matmul(x: Tensor, matrix) -> Tensor:
    """``x @ matrix.T`` for a constant scipy sparse ``matrix`` of shape [V, P]."""
    if x.ndim != 2 or x.shape[1] != matrix.shape[1]:
        raise ValueError(f"sparse_matmul: input {x.shape} vs matrix {matrix.shape}")
    mt = matrix.T.tocsr()
    out = np.asarray((mt.T @ x.data.T).T, dtype=x.dtype)

    def backward(g):
        return (np.asarray((mt @ g.T).T, dtype=x.dtype),)

    return make_result(out, (x,), backward, "sparse_matmul")


# ---------------------------------------------------------------------------
# softmax family
# ---------------------------------------------------------------------------

def softmax(a: Tensor, axis: int = 0) -> Tensor:
    axis = _norm_axis(axis, a.ndim)[0]
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return make_result(out, (a,), backward, "softmax")


def log_softmax(a: Tensor, axis: int = 0) -> Tensor:
    axis = _norm_axis(axis, a.ndim)[0]
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),)

    return make_result(out, (a,), backward, "log_softmax")


# ---------------------------------------------------------------------------
# convolutions (im2col over strided views, one GEMM per call)
# ---------------------------------------------------------------------------

def _tuple(v, n):
    return tuple(v) if isinstance(v, (tuple, list)) else (v,) * n


def _im2col(xp: np.ndarray, ks, stride, dilation, osz):
    """(C*K, B*prod(osz)) column matrix plus the per-tap slices used to build it."""
    B, C = xp.shape[:2]
    K = int(np.prod(ks))
    taps = list(product(*[range(k) for k in ks]))
    slices = [
        (slice(None), slice(None))
        + tuple(slice(t * d, t * d + st * (o - 1) + 1, st) for t, d, st, o in zip(tap, dilation, stride, osz))
        for tap in taps
    ]
    if K == 1 and all(st == 1 for st in stride) and tuple(xp.shape[2:]) == tuple(osz):
        return np.swapaxes(xp, 0, 1).reshape(C, -1), slices
    cols = np.empty((C, K, B) + tuple(osz), dtype=xp.dtype)
    for t, sl in enumerate(slices):
        cols[:, t] = np.swapaxes(xp[sl], 0, 1)
    return cols.reshape(C * K, -1), slices


def _convnd(x: Tensor, weight: Tensor, bias, stride, padding, dilation, op: str) -> Tensor:
    nd = x.ndim - 2
    B, C = x.shape[:2]
    O, Cw = weight.shape[:2]
    ks = weight.shape[2:]
    if Cw != C:
        raise ValueError(f"{op}: input has {C} channels, weight expects {Cw}")
    if bias is not None and bias.shape != (O,):
        raise ValueError(f"{op}: bias shape {bias.shape} != ({O},)")
    stride, padding, dilation = _tuple(stride, nd), _tuple(padding, nd), _tuple(dilation, nd)
    span = [d * (k - 1) + 1 for k, d in zip(ks, dilation)]
    padded = [n + 2 * p for n, p in zip(x.shape[2:], padding)]
    for i in range(nd):
        if padded[i] < span[i]:
            raise ValueError(
                f"{op}: spatial dim {i} has size {x.shape[2 + i]} (+2*{padding[i]} pad) "
                f"smaller than kernel extent {span[i]}"
            )
    osz = [(p - s) // st + 1 for p, s, st in zip(padded, span, stride)]
    K = int(np.prod(ks))
    xp = np.pad(x.data, [(0, 0), (0, 0)] + [(p, p) for p in padding]) if any(padding) else x.data
    cols2, slices = _im2col(xp, ks, stride, dilation, osz)
    w2 = weight.data.reshape(O, C * K)
    out = w2 @ cols2
    if bias is not None:
        out += bias.data[:, None]
    out = np.swapaxes(out.reshape((O, B) + tuple(osz)), 0, 1)
    # stride-1 convs with fewer outputs than inputs get the input gradient as
    # a transposed convolution, which touches O rather than C channels per tap
    transposed = all(st == 1 for st in stride) and O < C and K > 1

    def input_grad(g, g2):
        if transposed:
            back_pad = [d * (k - 1) - p for k, d, p in zip(ks, dilation, padding)]
            if min(back_pad) >= 0:
                gp = np.pad(g, [(0, 0), (0, 0)] + [(p, p) for p in back_pad]) if any(back_pad) else g
                gcols, _ = _im2col(gp, ks, stride, dilation, x.shape[2:])
                flip = (slice(None), slice(None)) + (slice(None, None, -1),) * nd
                wt = np.swapaxes(weight.data[flip], 0, 1).reshape(C, O * K)
                return np.swapaxes((wt @ gcols).reshape((C, B) + x.shape[2:]), 0, 1)
        gcols = (w2.T @ g2).reshape((C, K, B) + tuple(osz))
        gxp = np.zeros(xp.shape, dtype=x.dtype)
        for t, sl in enumerate(slices):
            gxp[sl] += np.swapaxes(gcols[:, t], 0, 1)
        if any(padding):
            inner = (slice(None), slice(None)) + tuple(
                slice(p, p + n) for p, n in zip(padding, x.shape[2:])
            )
            gxp = gxp[inner]
        return gxp

    def backward(g):
        g2 = np.swapaxes(g, 0, 1).reshape(O, -1)
        gw = (g2 @ cols2.T).reshape(weight.shape)
        gx = input_grad(g, g2) if x.requires_grad else None
        res = [gx, gw]
        if bias is not None:
            res.append(g2.sum(1))
        return res

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward, op)


def conv2d(x: Tensor, weight: Tensor, bias=None, stride=1, padding=0) -> Tensor:
    """Cross-correlation of a [B, C, H, W] input with [O, C, kh, kw] weights."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d: expected 4-d input and weight, got {x.shape}, {weight.shape}")
    return _convnd(x, weight, bias, stride, padding, 1, "conv2d")


def conv3d(x: Tensor, weight: Tensor, bias=None, stride=1, padding=0, dilation=1) -> Tensor:
    """Cross-correlation of a [B, C, X, Y, Z] input with [O, C, kx, ky, kz] weights."""
    if x.ndim != 5 or weight.ndim != 5:
        raise ValueError(f"conv3d: expected 5-d input and weight, got {x.shape}, {weight.shape}")
    return _convnd(x, weight, bias, stride, padding, dilation, "conv3d")


def conv1d_axis(x: Tensor, weight: Tensor, axis, bias=None) -> Tensor:
    """Size-preserving 1-d convolution along one spatial axis of [B, C, X, Y, Z].

    ``weight`` has shape [O, C, k] with odd ``k``; padding is (k - 1) / 2.
    """
    ax = AXES[axis] if isinstance(axis, str) else int(axis)
    if ax not in (0, 1, 2):
        raise ValueError(f"conv1d_axis: axis must be x, y or z, got {axis!r}")
    if x.ndim != 5 or weight.ndim != 3:
        raise ValueError(f"conv1d_axis: expected 5-d input and 3-d weight, got {x.shape}, {weight.shape}")
    k = weight.shape[2]
    if k % 2 == 0:
        raise ValueError(f"conv1d_axis: kernel size must be odd, got {k}")
    kshape = [1, 1, 1]
    kshape[ax] = k
    padding = [0, 0, 0]
    padding[ax] = (k - 1) // 2
    w3 = reshape(weight, weight.shape[:2] + tuple(kshape))
    return _convnd(x, w3, bias, 1, tuple(padding), 1, "conv1d_axis")


# ---------------------------------------------------------------------------
# normalisation and resampling
# ---------------------------------------------------------------------------

def _norm_backward(g, xhat, inv, gamma_b, axes, n):
    dxhat = g * gamma_b
    return inv * (dxhat - dxhat.mean(axis=axes, keepdims=True)
                  - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True))


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-(sample, channel) normalisation over all spatial axes of [B, C, ...]."""
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ValueError(f"instance_norm: affine params must have shape ({C},)")
    axes = tuple(range(2, x.ndim))
    bshape = (1, C) + (1,) * (x.ndim - 2)
    return _affine_norm(x, gamma, beta, eps, axes, bshape, "instance_norm")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, axis: int = 0, eps: float = 1e-5) -> Tensor:
    """Normalise along ``axis`` (e.g. channels of a [C, N] feature matrix)."""
    axis = _norm_axis(axis, x.ndim)[0]
    C = x.shape[axis]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ValueError(f"layer_norm: affine params must have shape ({C},)")
    bshape = [1] * x.ndim
    bshape[axis] = C
    return _affine_norm(x, gamma, beta, eps, (axis,), tuple(bshape), "layer_norm")


def _affine_norm(x, gamma, beta, eps, axes, bshape, op):
    xd = x.data
    n = int(np.prod([x.shape[a] for a in axes]))
    mu = xd.mean(axis=axes, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gb = gamma.data.reshape(bshape)
    out = xhat * gb + beta.data.reshape(bshape)
    red = tuple(i for i in range(x.ndim) if bshape[i] == 1)

    def backward(g):
        gx = _norm_backward(g, xhat, inv, gb, axes, n)
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return make_result(out.astype(xd.dtype, copy=False), (x, gamma, beta), backward, op)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling of every spatial axis of [B, C, ...]."""
    out = x.data
    nd = x.ndim - 2
    for ax in range(2, x.ndim):
        out = np.repeat(out, factor, axis=ax)
    shape = x.shape

    def backward(g):
        new = shape[:2] + _interleave(shape[2:], factor)
        gr = g.reshape(new)
        return (gr.sum(axis=tuple(3 + 2 * i for i in range(nd))),)

    return make_result(out, (x,), backward, "upsample_nearest")


def _interleave(dims, factor):
    res = ()
    for d in dims:
        res += (d, factor)
    return res
