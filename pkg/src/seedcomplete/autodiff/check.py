"""Central finite-difference gradient checking."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error <= self.tol)


def numerical_grad(fn: Callable[[], Tensor], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """d fn() / d x by central differences, perturbing ``x.data`` in place."""
    grad = np.zeros_like(x.data, dtype=np.float64)
    flat = x.data.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = float(fn().data.sum())
        flat[i] = old - h
        down = float(fn().data.sum())
        flat[i] = old
        grad.reshape(-1)[i] = (up - down) / (2 * h)
    return grad


def check_gradients(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    name: str = "",
    tol: float = 1e-4,
    h: float = 1e-5,
) -> GradCheckResult:
    """Compare autodiff and central differences for a scalar-valued ``fn``.

    The error metric is ``|auto - numeric| / max(1, |numeric|)`` maximised over
    every element of every input.
    """
    for x in inputs:
        x.grad = None
    out = fn()
    out.backward()
    worst = 0.0
    for x in inputs:
        auto = np.zeros_like(x.data) if x.grad is None else x.grad
        num = numerical_grad(fn, x, h)
        err = np.abs(auto - num) / np.maximum(1.0, np.abs(num))
        if err.size:
            worst = max(worst, float(err.max()))
    return GradCheckResult(name, worst, tol)
