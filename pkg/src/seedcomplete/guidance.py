"""Training-time guidance heads: dense geometry guidance on the lifted
volume and sparse semantic guidance on the seed voxels."""
from __future__ import annotations

import numpy as np

from .autodiff import Tensor, ops
from .autodiff.nn import ColumnMLP, Conv3d, Module
from .diffusion import AnisotropicConv
from .sparse import SparseContext, SparseEncoderBlock
from .voxels import INVALID, check_in_bounds


class GeometryHead(Module):
    """Anisotropic conv + linear layer predicting per-voxel occupancy logits."""

    def __init__(self, channels: int, rng):
        self.aic = AnisotropicConv(channels, rng)
        self.linear = Conv3d(channels, 1, rng, 1)

    def forward(self, volume: Tensor) -> Tensor:
        """[C, X, Y, Z] -> logits [X, Y, Z]."""
        x = ops.reshape(volume, (1,) + volume.shape)
        out = self.linear(self.aic(x))
        return ops.reshape(out, volume.shape[1:])


class SemanticGuidance(Module):
    def __init__(self, channels: int, n_classes: int, rng, fusion_hidden: int | None = None):
        self.seb1 = SparseEncoderBlock(channels, channels, rng)
        self.seb2 = SparseEncoderBlock(channels, channels, rng)
        hidden = 2 * channels if fusion_hidden is None else fusion_hidden
        self.fusion = ColumnMLP(3 * channels, hidden, channels, rng)
        self.head = ColumnMLP(channels, channels, n_classes, rng)
        if self.fusion.fc1.weight.shape[1] != 3 * channels:
            raise ValueError("fusion input width must be three times the seed channels")

    def fuse(self, seed_feats: Tensor, ctx: SparseContext) -> Tensor:
        f1 = self.seb1(seed_feats, ctx)
        f2 = self.seb2(f1, ctx)
        if seed_feats.shape[1] == 0:
            return Tensor(np.zeros((self.fusion.fc2.weight.shape[0], 0), dtype=seed_feats.dtype))
        return self.fusion(ops.concat([seed_feats, f1, f2], axis=0))

    def forward(self, seed_feats: Tensor, ctx: SparseContext, with_head: bool = True):
        """Return ``(fused [C, N_s], seed logits [C_class, N_s] or None)``."""
        fused = self.fuse(seed_feats, ctx)
        if not with_head:
            return fused, None
        if fused.shape[1] == 0:
            return fused, Tensor(np.zeros((self.head.fc2.weight.shape[0], 0), dtype=fused.dtype))
        return fused, self.head(fused)


def seed_labels(labels: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Working-resolution labels at the seed coordinates (INVALID kept for masking)."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    check_in_bounds(coords, labels.shape)
    return labels[coords[:, 0], coords[:, 1], coords[:, 2]]


__all__ = ["GeometryHead", "SemanticGuidance", "seed_labels", "INVALID"]
