"""Minimal reverse-mode autodiff over numpy arrays."""
from . import ops
from .check import GradCheckResult, check_gradients, numerical_grad
from .optim import AdamW
from .tensor import (
    Tensor,
    as_tensor,
    default_dtype,
    get_default_dtype,
    is_grad_enabled,
    no_grad,
    set_default_dtype,
)

__all__ = [
    "AdamW", "GradCheckResult", "Tensor", "as_tensor", "check_gradients",
    "default_dtype", "get_default_dtype", "is_grad_enabled", "no_grad",
    "numerical_grad", "ops", "set_default_dtype",
]
