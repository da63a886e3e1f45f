"""Voxel aggregation and multi-scale semantic diffusion.

All dense volumes here carry a leading batch axis of 1: [1, C, X, Y, Z].
"""
from __future__ import annotations

import numpy as np

from .autodiff import Tensor, ops
from .autodiff.nn import ColumnLinear, Conv3d, InstanceNorm, Module, kaiming, parameter
from .voxels import linear_index

AXIS_ORDER = ("x", "y", "z")


class AnisotropicConv(Module):
    """Three consecutive per-axis 1-d convolutions plus a residual.

    Along each axis a mixer blends parallel kernels of the given odd sizes
    with softmax weights. The blend is linear, so it is folded into a single
    kernel of the largest size before convolving. ``normalize`` appends
    instance norm and relu after the residual.
    """

    def __init__(self, channels: int, rng, kernels=(3, 5, 7), normalize: bool = True):
        if any(k % 2 == 0 for k in kernels):
            raise ValueError(f"mixer kernel sizes must be odd, got {kernels}")
        self.kernels = tuple(kernels)
        self.kmax = max(self.kernels)
        self.weights = []
        self.biases = []
        self.mixers = []
        for _ in AXIS_ORDER:
            self.weights.append([kaiming(rng, (channels, channels, k), channels * k) for k in self.kernels])
            self.biases.append([parameter(np.zeros(channels)) for _ in self.kernels])
            self.mixers.append(parameter(np.zeros(len(self.kernels))))
        self.norm = InstanceNorm(channels) if normalize else None

    def named_parameters(self, prefix: str = ""):
        for a, axis in enumerate(AXIS_ORDER):
            for k, size in enumerate(self.kernels):
                yield f"{prefix}{axis}.w{size}", self.weights[a][k]
                yield f"{prefix}{axis}.b{size}", self.biases[a][k]
            yield f"{prefix}{axis}.mix", self.mixers[a]
        if self.norm is not None:
            yield from self.norm.named_parameters(prefix + "norm.")

    def mixer_weights(self, axis: int) -> Tensor:
        return ops.softmax(self.mixers[axis], axis=0)

    def axis_kernel(self, axis: int):
        """Folded (weight, bias) of one axis' mixer."""
        mix = self.mixer_weights(axis)
        padded = []
        for w, k in zip(self.weights[axis], self.kernels):
            p = (self.kmax - k) // 2
            padded.append(ops.pad(w, [(0, 0), (0, 0), (p, p)]) if p else w)
        return ops.weighted_sum(mix, padded), ops.weighted_sum(mix, self.biases[axis])

    def forward(self, x: Tensor) -> Tensor:
        h = x
        for a, axis in enumerate(AXIS_ORDER):
            w, b = self.axis_kernel(a)
            h = ops.conv1d_axis(h, w, axis, b)
        out = ops.add(x, h)
        if self.norm is not None:
            out = ops.relu(self.norm(out))
        return out


class ASPP(Module):
    """Parallel dilated 3^3 convolutions fused by a 1x1x1 convolution, with a residual."""

    def __init__(self, channels: int, branch: int, rng, rates=(1, 2, 3), normalize: bool = True):
        self.rates = tuple(rates)
        self.branches = [Conv3d(channels, branch, rng, 3, dilation=r) for r in self.rates]
        self.norms = [InstanceNorm(branch) for _ in self.rates] if normalize else []
        self.fuse = Conv3d(branch * len(self.rates), channels, rng, 1)
        self.fuse_norm = InstanceNorm(channels) if normalize else None

    def forward(self, x: Tensor) -> Tensor:
        outs = []
        for i, conv in enumerate(self.branches):
            h = conv(x)
            if self.norms:
                h = self.norms[i](h)
            outs.append(ops.relu(h))
        h = self.fuse(ops.concat(outs, axis=1))
        out = ops.add(x, h)
        if self.fuse_norm is not None:
            out = ops.relu(self.fuse_norm(out))
        return out


class MSSD(Module):
    """``depth`` anisotropic conv layers, ASPP, and a per-voxel class head."""

    def __init__(self, channels: int, n_classes: int, rng, depth: int = 3, aspp_branch: int = 8,
                 normalize: bool = True):
        self.layers = [AnisotropicConv(channels, rng, normalize=normalize) for _ in range(depth)]
        self.aspp = ASPP(channels, aspp_branch, rng, normalize=normalize)
        self.head = Conv3d(channels, n_classes, rng, 1)

    def logits(self, x: Tensor) -> Tensor:
        """[1, C, X, Y, Z] -> [C_class, X, Y, Z] class scores."""
        for layer in self.layers:
            x = layer(x)
        x = self.aspp(x)
        out = self.head(x)
        return ops.reshape(out, out.shape[1:])

    def forward(self, x: Tensor) -> Tensor:
        return ops.softmax(self.logits(x), axis=0)

    def receptive_radius(self) -> int:
        """Chebyshev radius (in voxels) over which one input voxel can act."""
        per_layer = max(lay.kmax for lay in self.layers) // 2 if self.layers else 0
        return per_layer * len(self.layers) + max(self.aspp.rates)


class VoxelAggregation(Module):
    """Combine seed features with transferred non-seed features, append the
    occupancy features and mix per voxel."""

    def __init__(self, channels: int, occ_channels: int, rng):
        self.transfer = ColumnLinear(channels, channels, rng)
        width = channels + occ_channels
        self.mix1 = Conv3d(width, width, rng, 1)
        self.mix2 = Conv3d(width, width, rng, 1)

    def combine(self, seed_feats: Tensor, seed_coords: np.ndarray, volume: Tensor) -> Tensor:
        """Grid holding seed features at seeds and transferred features elsewhere."""
        C = volume.shape[0]
        dims = volume.shape[1:]
        V = int(np.prod(dims))
        seed_lin = linear_index(seed_coords, dims) if len(seed_coords) else np.zeros(0, np.int64)
        writes = np.bincount(seed_lin, minlength=V)
        rest = np.flatnonzero(writes == 0)
        writes[rest] += 1
        if writes.max(initial=0) > 1 or writes.min(initial=1) < 1:
            raise RuntimeError("seed and non-seed writes overlap")
        flat = ops.reshape(volume, (C, V))
        parts = []
        if len(rest):
            parts.append(ops.scatter_columns(self.transfer(ops.gather_columns(flat, rest)), rest, V))
        if len(seed_lin):
            parts.append(ops.scatter_columns(seed_feats, seed_lin, V))
        grid = parts[0] if len(parts) == 1 else ops.add(parts[0], parts[1])
        return ops.reshape(grid, (C,) + tuple(dims))

    def forward(self, seed_feats: Tensor, seed_coords: np.ndarray, volume: Tensor, occ_feats: Tensor) -> Tensor:
        grid = self.combine(seed_feats, seed_coords, volume)
        x = ops.concat([grid, occ_feats], axis=0)
        x = ops.reshape(x, (1,) + x.shape)
        return self.mix2(ops.relu(self.mix1(x)))
