"""Finite-difference checks for every differentiable op and the composite blocks.

Each entry builds small random float64 inputs and compares the tape gradient
of a random projection of the output against central differences.
"""
from __future__ import annotations

import time
from typing import Callable

import numpy as np

from .autodiff import Tensor, default_dtype, ops
from .autodiff.check import GradCheckResult, check_gradients
from .autodiff.tensor import make_result
from .camera import CameraModel, view_transform
from .diffusion import AnisotropicConv
from .losses import lovasz_softmax, scal_loss
from .sparse import SparseContext, SparseEncoderBlock
from .voxels import SceneSpec

REGISTRY: dict = {}


def register(name: str):
    def wrap(fn):
        REGISTRY[name] = fn
        return fn
    return wrap


def _leaf(rng, *shape, lo=None, hi=None):
    data = rng.uniform(lo, hi, size=shape) if lo is not None else rng.normal(size=shape)
    return Tensor(data, requires_grad=True, dtype=np.float64)


def _projected(out_fn: Callable[[], Tensor], rng) -> Callable[[], Tensor]:
    """Scalar ``<r, out>`` with a fixed random ``r`` of the output's shape."""
    probe = out_fn()
    r = Tensor(rng.normal(size=probe.shape), dtype=np.float64)
    return lambda: ops.sum(ops.mul(out_fn(), r))


def _check(name, out_fn, inputs, rng, tol, scalar=False):
    fn = out_fn if scalar else _projected(out_fn, rng)
    return check_gradients(fn, inputs, name, tol=tol)


# -- elementwise --------------------------------------------------------------

@register("add")
def _(rng, tol):
    a, b = _leaf(rng, 3, 4), _leaf(rng, 3, 4)
    return _check("add", lambda: ops.add(a, b), [a, b], rng, tol)


@register("sub")
def _(rng, tol):
    a, b = _leaf(rng, 3, 4), _leaf(rng, 3, 4)
    return _check("sub", lambda: ops.sub(a, b), [a, b], rng, tol)


@register("mul")
def _(rng, tol):
    a, b = _leaf(rng, 3, 4), _leaf(rng, 3, 4)
    return _check("mul", lambda: ops.mul(a, b), [a, b], rng, tol)


@register("div")
def _(rng, tol):
    a, b = _leaf(rng, 3, 4), _leaf(rng, 3, 4, lo=0.5, hi=2.0)
    return _check("div", lambda: ops.div(a, b), [a, b], rng, tol)


@register("neg")
def _(rng, tol):
    a = _leaf(rng, 5)
    return _check("neg", lambda: ops.neg(a), [a], rng, tol)


@register("exp")
def _(rng, tol):
    a = _leaf(rng, 5)
    return _check("exp", lambda: ops.exp(a), [a], rng, tol)


@register("log")
def _(rng, tol):
    a = _leaf(rng, 5, lo=0.2, hi=3.0)
    return _check("log", lambda: ops.log(a), [a], rng, tol)


@register("relu")
def _(rng, tol):
    a = Tensor(rng.choice([-1, 1], 8) * rng.uniform(0.1, 1.0, 8), requires_grad=True, dtype=np.float64)
    return _check("relu", lambda: ops.relu(a), [a], rng, tol)


@register("sigmoid")
def _(rng, tol):
    a = _leaf(rng, 6)
    return _check("sigmoid", lambda: ops.sigmoid(a), [a], rng, tol)


@register("clamp")
def _(rng, tol):
    a = Tensor(np.array([-2.0, -0.3, 0.1, 0.45, 1.7, 3.0]), requires_grad=True, dtype=np.float64)
    return _check("clamp", lambda: ops.clamp(a, -1.0, 1.0), [a], rng, tol)


# -- reductions and shape -------------------------------------------------------

@register("sum")
def _(rng, tol):
    a = _leaf(rng, 3, 4, 2)
    return _check("sum", lambda: ops.sum(a, axis=1, keepdims=True), [a], rng, tol)


@register("mean")
def _(rng, tol):
    a = _leaf(rng, 3, 4)
    return _check("mean", lambda: ops.mean(a, axis=0), [a], rng, tol)


@register("reshape")
def _(rng, tol):
    a = _leaf(rng, 3, 4)
    return _check("reshape", lambda: ops.reshape(a, (2, 6)), [a], rng, tol)


@register("transpose")
def _(rng, tol):
    a = _leaf(rng, 2, 3, 4)
    return _check("transpose", lambda: ops.transpose(a, (2, 0, 1)), [a], rng, tol)


@register("concat")
def _(rng, tol):
    a, b = _leaf(rng, 2, 3), _leaf(rng, 4, 3)
    return _check("concat", lambda: ops.concat([a, b], axis=0), [a, b], rng, tol)


@register("getitem")
def _(rng, tol):
    a = _leaf(rng, 4, 5)
    idx = (np.array([0, 2, 2, 3]), np.array([1, 1, 1, 4]))
    return _check("getitem", lambda: ops.concat([ops.getitem(a, idx), ops.getitem(a, (slice(1, 3), 2))], axis=0),
                  [a], rng, tol)


@register("pad")
def _(rng, tol):
    a = _leaf(rng, 2, 3)
    return _check("pad", lambda: ops.pad(a, [(1, 0), (2, 1)]), [a], rng, tol)


# -- gather / scatter / linear ----------------------------------------------------

@register("gather_columns")
def _(rng, tol):
    a = _leaf(rng, 3, 5)
    idx = np.array([[0, 4, -1], [2, 2, 1]])
    return _check("gather_columns", lambda: ops.gather_columns(a, idx), [a], rng, tol)


@register("scatter_columns")
def _(rng, tol):
    a = _leaf(rng, 3, 5)
    idx = np.array([1, 3, 1, 0, 6])
    return _check("scatter_columns", lambda: ops.scatter_columns(a, idx, 7), [a], rng, tol)


@register("matmul")
def _(rng, tol):
    a, b = _leaf(rng, 3, 4), _leaf(rng, 4, 2)
    return _check("matmul", lambda: ops.matmul(a, b), [a, b], rng, tol)


@register("linear")
def _(rng, tol):
    x, w, b = _leaf(rng, 2, 3, 4), _leaf(rng, 5, 4), _leaf(rng, 5)
    return _check("linear", lambda: ops.linear(x, w, b), [x, w, b], rng, tol)


@register("column_linear")
def _(rng, tol):
    x, w, b = _leaf(rng, 4, 6), _leaf(rng, 3, 4), _leaf(rng, 3)
    return _check("column_linear", lambda: ops.column_linear(x, w, b), [x, w, b], rng, tol)


@register("weighted_sum")
def _(rng, tol):
    w = _leaf(rng, 3)
    ts = [_leaf(rng, 2, 4) for _ in range(3)]
    return _check("weighted_sum", lambda: ops.weighted_sum(w, ts), [w] + ts, rng, tol)


@register("sparse_matmul")
def _(rng, tol):
    import scipy.sparse as sp

    x = _leaf(rng, 3, 6)
    m = sp.random(5, 6, density=0.5, random_state=np.random.RandomState(1), format="csr")
    return _check("sparse_matmul", lambda: ops.sparse_matmul(x, m), [x], rng, tol)


# -- softmax family -------------------------------------------------------------------

@register("softmax")
def _(rng, tol):
    a = _leaf(rng, 4, 3)
    return _check("softmax", lambda: ops.softmax(a, axis=0), [a], rng, tol)


@register("log_softmax")
def _(rng, tol):
    a = _leaf(rng, 4, 3)
    return _check("log_softmax", lambda: ops.log_softmax(a, axis=0), [a], rng, tol)


# -- convolutions and normalisation -----------------------------------------------------

@register("conv2d")
def _(rng, tol):
    x, w, b = _leaf(rng, 1, 2, 6, 5), _leaf(rng, 3, 2, 3, 3), _leaf(rng, 3)
    return _check("conv2d", lambda: ops.conv2d(x, w, b, stride=2, padding=1), [x, w, b], rng, tol)


@register("conv3d")
def _(rng, tol):
    x, w, b = _leaf(rng, 1, 3, 5, 4, 4), _leaf(rng, 2, 3, 3, 3, 3), _leaf(rng, 2)
    return _check("conv3d", lambda: ops.conv3d(x, w, b, stride=1, padding=2, dilation=2), [x, w, b], rng, tol)


@register("conv1d_axis")
def _(rng, tol):
    x, w, b = _leaf(rng, 1, 2, 5, 4, 3), _leaf(rng, 3, 2, 5), _leaf(rng, 3)
    return _check("conv1d_axis", lambda: ops.conv1d_axis(x, w, "y", b), [x, w, b], rng, tol)


@register("instance_norm")
def _(rng, tol):
    x, g, b = _leaf(rng, 1, 3, 4, 3, 2), _leaf(rng, 3), _leaf(rng, 3)
    return _check("instance_norm", lambda: ops.instance_norm(x, g, b), [x, g, b], rng, tol)


@register("layer_norm")
def _(rng, tol):
    x, g, b = _leaf(rng, 4, 6), _leaf(rng, 4), _leaf(rng, 4)
    return _check("layer_norm", lambda: ops.layer_norm(x, g, b, axis=0), [x, g, b], rng, tol)


@register("upsample_nearest")
def _(rng, tol):
    x = _leaf(rng, 1, 2, 2, 3, 2)
    return _check("upsample_nearest", lambda: ops.upsample_nearest(x, 2), [x], rng, tol)


# -- composite blocks -----------------------------------------------------------------------

@register("block:anisotropic_conv")
def _(rng, tol):
    aic = AnisotropicConv(2, rng)
    x = _leaf(rng, 1, 2, 5, 4, 3)
    return _check("block:anisotropic_conv", lambda: aic(x), [x] + aic.parameters(), rng, tol)


@register("block:sparse_encoder")
def _(rng, tol):
    coords = np.unique(rng.integers(0, 6, size=(25, 3)), axis=0)
    ctx = SparseContext(coords, (6, 6, 6))
    seb = SparseEncoderBlock(3, 4, rng)
    x = _leaf(rng, 3, len(coords))
    return _check("block:sparse_encoder", lambda: seb(x, ctx), [x] + seb.parameters(), rng, tol)


def _probs(rng, C, N):
    logits = _leaf(rng, C, N)
    return logits, lambda: ops.softmax(logits, axis=0)


@register("block:scal_sem")
def _(rng, tol):
    logits, probs = _probs(rng, 4, 12)
    labels = rng.integers(0, 4, 12)
    labels[[2, 7]] = 255
    return _check("block:scal_sem", lambda: scal_loss(probs(), labels, "sem"), [logits], rng, tol, scalar=True)


@register("block:scal_geo")
def _(rng, tol):
    logits, probs = _probs(rng, 3, 12)
    labels = rng.integers(0, 3, 12)
    labels[5] = 255
    return _check("block:scal_geo", lambda: scal_loss(probs(), labels, "geo"), [logits], rng, tol, scalar=True)


@register("block:lovasz_softmax")
def _(rng, tol):
    logits, probs = _probs(rng, 4, 15)
    labels = rng.integers(0, 4, 15)
    labels[3] = 255
    return _check("block:lovasz_softmax", lambda: lovasz_softmax(probs(), labels), [logits], rng, tol,
                  scalar=True)


@register("block:view_transform")
def _(rng, tol):
    spec = SceneSpec(origin=(0.0, -1.6, -0.8), voxel_size=0.4, dims=(6, 8, 4))
    cams = [CameraModel.looking_along_x((-0.5 * t, 0.0, 0.0), 8.0, 16, 8) for t in range(2)]
    f2d = _leaf(rng, 2, 3, 4, 8)
    return _check("block:view_transform", lambda: view_transform(f2d, cams, spec), [f2d], rng, tol)


def run_all(tol: float = 1e-4, seed: int = 0, names=None) -> list:
    """Run every registered check (or ``names``) at float64."""
    results = []
    with default_dtype(np.float64):
        for name in names or sorted(REGISTRY):
            rng = np.random.default_rng([seed, sum(map(ord, name))])
            t0 = time.perf_counter()
            res = REGISTRY[name](rng, tol)
            res.name = name
            res.seconds = time.perf_counter() - t0
            results.append(res)
    return results


def corrupted_relu(a: Tensor) -> Tensor:
    """relu whose backward doubles the gradient; used as a negative control."""
    out = np.maximum(a.data, 0)
    return make_result(out, (a,), lambda g: (2.0 * g * (a.data > 0),), "corrupted_relu")


def negative_control(tol: float = 1e-4, seed: int = 0) -> GradCheckResult:
    rng = np.random.default_rng(seed)
    with default_dtype(np.float64):
        a = Tensor(rng.uniform(0.1, 1.0, 6) * rng.choice([-1, 1], 6), requires_grad=True, dtype=np.float64)
        return _check("corrupted_relu", lambda: corrupted_relu(a), [a], rng, tol)


def format_results(results) -> str:
    lines = [f"{r.name} {'PASS' if r.passed else 'FAIL'} max_rel_error={r.max_rel_error:.3e}" for r in results]
    n_ok = sum(r.passed for r in results)
    lines.append(f"summary {n_ok}/{len(results)} passed")
    return "\n".join(lines) + "\n"
