"""Sparse voxel proposals: coarse occupancy on depth-point voxels, a small
3-D UNet refining it to a dense occupancy field, and seed selection."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, ops
from .autodiff.nn import ColumnLinear, Conv3d, InstanceNorm, Module
from .sparse import SparseContext, SparseEncoderBlock
from .voxels import SparseVoxelSet, linear_index, unravel, voxelize_points

POINT_FEATURES = 4  # mean offset (3) + point count


def point_voxels(points: np.ndarray, spec) -> SparseVoxelSet:
    """Voxel-wise input features for the coarse stage: mean in-voxel offset and log count."""
    coords, feats = voxelize_points(points, spec, reduce="mean")
    feats = feats.copy()
    feats[3] = np.log1p(feats[3])
    return SparseVoxelSet(coords, feats, spec)


class CoarseOccupancy(Module):
    def __init__(self, channels: int, rng):
        self.block = SparseEncoderBlock(POINT_FEATURES, channels, rng)
        self.head = ColumnLinear(channels, 1, rng)

    def forward(self, feats: Tensor, ctx: SparseContext) -> Tensor:
        """Occupancy logits [1, N] on the active coordinates of ``ctx``."""
        if len(ctx) == 0:
            return Tensor(np.zeros((1, 0), dtype=feats.dtype))
        return self.head(self.block(feats, ctx))


def coarse_occupancy(points: np.ndarray, spec, model: CoarseOccupancy) -> SparseVoxelSet:
    """Voxelise ``points`` and predict per-voxel occupancy logits (set feats)."""
    vox = point_voxels(points, spec)
    ctx = SparseContext(vox.coords, spec.dims)
    logits = model(Tensor(vox.feats), ctx)
    return SparseVoxelSet(vox.coords, logits, spec)


def densify(logits: Tensor, coords: np.ndarray, dims) -> Tensor:
    """Refiner input [1, 2, X, Y, Z]: coarse probability and point-presence mask."""
    V = int(np.prod(dims))
    lin = linear_index(coords, dims) if len(coords) else np.zeros(0, np.int64)
    dtype = logits.dtype
    if len(lin):
        prob = ops.scatter_columns(ops.sigmoid(logits), lin, V)
    else:
        prob = Tensor(np.zeros((1, V), dtype=dtype))
    mask = np.zeros((1, V), dtype=dtype)
    mask[0, lin] = 1
    x = ops.concat([prob, Tensor(mask)], axis=0)
    return ops.reshape(x, (1, 2) + tuple(dims))


@dataclass
class OccupancyOutput:
    logits: Tensor  # [X, Y, Z]
    features: Tensor  # [C_o, X, Y, Z]

    @property
    def probs(self) -> Tensor:
        return ops.sigmoid(self.logits)


class _ConvBlock(Module):
    def __init__(self, cin, cout, rng, stride=1):
        self.conv = Conv3d(cin, cout, rng, 3, stride=stride)
        self.norm = InstanceNorm(cout)

    def forward(self, x):
        return ops.relu(self.norm(self.conv(x)))


class OccupancyRefiner(Module):
    """Two-level UNet; skips are merged by addition after a 1x1 projection."""

    def __init__(self, rng, widths=(16, 32, 64), occ_channels: int = 8, cin: int = 2):
        w0, w1, w2 = widths
        self.enc0 = _ConvBlock(cin, w0, rng)
        self.down1 = _ConvBlock(w0, w1, rng, stride=2)
        self.enc1 = _ConvBlock(w1, w1, rng)
        self.down2 = _ConvBlock(w1, w2, rng, stride=2)
        self.enc2 = _ConvBlock(w2, w2, rng)
        self.proj2 = Conv3d(w2, w1, rng, 1)
        self.dec1 = _ConvBlock(w1, w1, rng)
        self.proj1 = Conv3d(w1, w0, rng, 1)
        self.dec0 = _ConvBlock(w0, occ_channels, rng)
        self.head = Conv3d(occ_channels, 1, rng, 1)

    def forward(self, x: Tensor) -> OccupancyOutput:
        dims = x.shape[2:]
        if any(d % 4 for d in dims):
            raise ValueError(f"refiner needs dims divisible by 4, got {dims}")
        e0 = self.enc0(x)
        e1 = self.enc1(self.down1(e0))
        e2 = self.enc2(self.down2(e1))
        d1 = self.dec1(ops.add(ops.upsample_nearest(self.proj2(e2), 2), e1))
        feats = self.dec0(ops.add(ops.upsample_nearest(self.proj1(d1), 2), e0))
        logits = self.head(feats)
        return OccupancyOutput(ops.reshape(logits, dims), ops.reshape(feats, feats.shape[1:]))


def refine_occupancy(coarse: SparseVoxelSet, dims, model: OccupancyRefiner) -> OccupancyOutput:
    return model(densify(coarse.feats, coarse.coords, dims))


def select_seeds(occupancy: np.ndarray, volume: Tensor | None, threshold: float = 0.5):
    """Seed voxels where occupancy > threshold (strict) and their gathered features.

    ``occupancy`` is an (X, Y, Z) probability array; ``volume`` a [C, X, Y, Z]
    tensor or None. Returns ``(coords [N, 3], feats [C, N] or None)``.
    """
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    occupancy = np.asarray(occupancy)
    lin = np.flatnonzero(occupancy.reshape(-1) > threshold)
    coords = unravel(lin, occupancy.shape)
    if volume is None:
        return coords, None
    C = volume.shape[0]
    feats = ops.gather_columns(ops.reshape(volume, (C, -1)), lin)
    return coords, feats
