"""Parameter containers and the small set of layers the model is built from."""
from __future__ import annotations

import numpy as np

from . import ops
from .tensor import Tensor, get_default_dtype


def parameter(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=get_default_dtype()), requires_grad=True)


def kaiming(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    std = np.sqrt(2.0 / max(fan_in, 1))
    return parameter(rng.normal(0.0, std, size=shape))


class Module:
    """Attribute-walking parameter registry in the usual style.

    Parameters are found in attribute insertion order, recursing into child
    modules and lists of modules, which makes the ordering deterministic.
    """

    training = True

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    """Affine map over the trailing axis."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, bias: bool = True):
        self.weight = kaiming(rng, (cout, cin), cin)
        self.bias = parameter(np.zeros(cout)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class ColumnLinear(Linear):
    """Affine map applied to every column of a channel-major [C, N] matrix."""

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] == 0:
            return Tensor(np.zeros((self.weight.shape[0], 0), dtype=x.dtype))
        return ops.column_linear(x, self.weight, self.bias)


class Conv3d(Module):
    def __init__(self, cin, cout, rng, kernel=3, stride=1, dilation=1, padding=None):
        k = (kernel,) * 3 if isinstance(kernel, int) else tuple(kernel)
        self.weight = kaiming(rng, (cout, cin) + k, cin * int(np.prod(k)))
        self.bias = parameter(np.zeros(cout))
        self.stride = stride
        self.dilation = dilation
        self.padding = tuple(dilation * (kk - 1) // 2 for kk in k) if padding is None else padding

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv3d(x, self.weight, self.bias, self.stride, self.padding, self.dilation)


class Conv2d(Module):
    def __init__(self, cin, cout, rng, kernel=3, stride=1, padding=None):
        self.weight = kaiming(rng, (cout, cin, kernel, kernel), cin * kernel * kernel)
        self.bias = parameter(np.zeros(cout))
        self.stride = stride
        self.padding = (kernel - 1) // 2 if padding is None else padding

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class InstanceNorm(Module):
    """Per-channel normalisation over the spatial axes of [B, C, ...]."""

    def __init__(self, channels: int):
        self.gamma = parameter(np.ones(channels))
        self.beta = parameter(np.zeros(channels))

    def forward(self, x: Tensor) -> Tensor:
        return ops.instance_norm(x, self.gamma, self.beta)


class ColumnNorm(Module):
    """Per-column normalisation across channels of a [C, N] matrix."""

    def __init__(self, channels: int):
        self.gamma = parameter(np.ones(channels))
        self.beta = parameter(np.zeros(channels))

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] == 0:
            return x
        return ops.layer_norm(x, self.gamma, self.beta, axis=0)


class ColumnMLP(Module):
    """Two affine layers with a relu between, on [C, N] columns."""

    def __init__(self, cin: int, hidden: int, cout: int, rng):
        self.fc1 = ColumnLinear(cin, hidden, rng)
        self.fc2 = ColumnLinear(hidden, cout, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(ops.relu(self.fc1(x)))
