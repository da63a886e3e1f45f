"""Scene grid bookkeeping: specs, coordinate conversion, dense/sparse voxel
containers, voxelisation, label downsampling and the VGRID file format.

Dense grids are plain numpy arrays shaped ``(X, Y, Z)`` or ``(C, X, Y, Z)`` in
C order, so the flat index of voxel ``(x, y, z)`` is ``(x*Y + y)*Z + z``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

INVALID = 255

#: default synthetic class map (id -> name)
CLASS_NAMES = {0: "empty", 1: "road", 2: "building", 3: "car", 4: "vegetation", 5: "pole"}


@dataclass(frozen=True)
class SceneSpec:
    origin: tuple = (0.0, -25.6, -2.0)
    voxel_size: float = 0.2
    dims: tuple = (256, 256, 32)

    def __post_init__(self):
        if not self.voxel_size > 0:
            raise ValueError(f"voxel_size must be positive, got {self.voxel_size}")
        if len(self.dims) != 3 or any(int(d) < 1 for d in self.dims):
            raise ValueError(f"dims must be three positive ints, got {self.dims}")
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "voxel_size", float(self.voxel_size))

    @classmethod
    def full(cls) -> "SceneSpec":
        """Full-scale output grid: 256x256x32 voxels of 0.2 m."""
        return cls()

    @classmethod
    def desk(cls) -> "SceneSpec":
        """Desk-scale output grid; its working grid is 32x32x8 voxels of 0.8 m."""
        return cls(origin=(0.0, -12.8, -2.0), voxel_size=0.4, dims=(64, 64, 16))

    @classmethod
    def parse(cls, text: str) -> "SceneSpec":
        """Parse ``full``, ``desk`` or ``X,Y,Z:s[:ox,oy,oz]`` (an output grid)."""
        text = text.strip()
        if text == "full":
            return cls.full()
        if text == "desk":
            return cls.desk()
        parts = text.split(":")
        dims = tuple(int(v) for v in parts[0].split(","))
        size = float(parts[1])
        origin = tuple(float(v) for v in parts[2].split(",")) if len(parts) > 2 else cls.origin
        return cls(origin=origin, voxel_size=size, dims=dims)

    def format(self) -> str:
        o = ",".join(repr(v) for v in self.origin)
        return f"{','.join(map(str, self.dims))}:{self.voxel_size!r}:{o}"

    @property
    def num_voxels(self) -> int:
        X, Y, Z = self.dims
        return X * Y * Z

    @property
    def extent(self) -> np.ndarray:
        """[[xmin, ymin, zmin], [xmax, ymax, zmax]] in metres."""
        lo = np.array(self.origin)
        return np.stack([lo, lo + np.array(self.dims) * self.voxel_size])

    def coarsen(self, factor: int = 2) -> "SceneSpec":
        if any(d % factor for d in self.dims):
            raise ValueError(f"dims {self.dims} not divisible by {factor}")
        return SceneSpec(self.origin, self.voxel_size * factor, tuple(d // factor for d in self.dims))

    def refine(self, factor: int = 2) -> "SceneSpec":
        return SceneSpec(self.origin, self.voxel_size / factor, tuple(d * factor for d in self.dims))


@dataclass
class VoxelGrid:
    spec: SceneSpec
    values: np.ndarray

    def __post_init__(self):
        if tuple(self.values.shape[-3:]) != self.spec.dims:
            raise ValueError(f"grid values {self.values.shape} do not end in dims {self.spec.dims}")


@dataclass
class SparseVoxelSet:
    """Unique in-bounds voxel coordinates with channel-major features."""

    coords: np.ndarray
    feats: object = None
    spec: SceneSpec | None = field(default=None, repr=False)

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 3)

    def __len__(self) -> int:
        return len(self.coords)


# ---------------------------------------------------------------------------
# coordinates
# ---------------------------------------------------------------------------

def centroids(spec: SceneSpec) -> np.ndarray:
    """World xyz of every voxel centroid in layout order, shape (X*Y*Z, 3)."""
    idx = np.indices(spec.dims).reshape(3, -1).T
    return np.asarray(spec.origin) + (idx + 0.5) * spec.voxel_size


def world_to_voxel(points: np.ndarray, spec: SceneSpec):
    """Integer voxel indices by ``floor((p - origin) / s)`` plus an in-bounds mask."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    idx = np.floor((points - np.asarray(spec.origin)) / spec.voxel_size).astype(np.int64)
    inside = np.all((idx >= 0) & (idx < np.asarray(spec.dims)), axis=1)
    return idx, inside


def linear_index(coords: np.ndarray, dims) -> np.ndarray:
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    X, Y, Z = dims
    return (coords[:, 0] * Y + coords[:, 1]) * Z + coords[:, 2]


def unravel(lin: np.ndarray, dims) -> np.ndarray:
    return np.stack(np.unravel_index(np.asarray(lin, dtype=np.int64), dims), axis=1)


def check_in_bounds(coords: np.ndarray, dims) -> None:
    coords = np.asarray(coords).reshape(-1, 3)
    bad = ~np.all((coords >= 0) & (coords < np.asarray(dims)), axis=1)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise IndexError(f"voxel coordinate #{i} {tuple(int(v) for v in coords[i])} outside grid {tuple(dims)}")


# ---------------------------------------------------------------------------
# voxelisation and resampling
# ---------------------------------------------------------------------------

def voxelize_points(points, spec: SceneSpec, reduce: str = "occupancy", features=None):
    """Bin points into the grid; points outside the grid are dropped.

    ``reduce="occupancy"`` returns a boolean (X, Y, Z) grid. ``reduce="mean"``
    returns ``(coords, feats)`` for the occupied voxels, where ``feats`` is
    (F + 1, N): the per-voxel mean of the attached point features (by default
    the point offset from the voxel centroid in voxel units) followed by the
    point count.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    idx, inside = world_to_voxel(points, spec)
    lin = linear_index(idx[inside], spec.dims)
    if reduce == "occupancy":
        grid = np.zeros(spec.num_voxels, dtype=bool)
        grid[lin] = True
        return grid.reshape(spec.dims)
    if reduce != "mean":
        raise ValueError(f"unknown reduce mode {reduce!r}")
    if features is None:
        centre = np.asarray(spec.origin) + (idx + 0.5) * spec.voxel_size
        features = (points - centre) / spec.voxel_size
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 1:
        features = features[:, None]
    features = features[inside]
    uniq, inv, counts = np.unique(lin, return_inverse=True, return_counts=True)
    sums = np.zeros((len(uniq), features.shape[1]))
    np.add.at(sums, inv, features)
    feats = np.concatenate([sums / counts[:, None], counts[:, None].astype(np.float64)], axis=1).T
    return unravel(uniq, spec.dims), feats


def downsample_labels(labels: np.ndarray, factor: int = 2) -> np.ndarray:
    """Majority vote over ``factor**3`` blocks, ignoring INVALID.

    All-invalid blocks stay INVALID. Ties go to the smallest tied class id,
    except that the empty class 0 loses every tie against a non-empty class.
    """
    labels = np.asarray(labels)
    X, Y, Z = labels.shape
    if X % factor or Y % factor or Z % factor:
        raise ValueError(f"label dims {labels.shape} not divisible by {factor}")
    f = factor
    blocks = labels.reshape(X // f, f, Y // f, f, Z // f, f).transpose(0, 2, 4, 1, 3, 5).reshape(-1, f ** 3)
    nb = len(blocks)
    counts = np.zeros((nb, 256), dtype=np.int64)
    np.add.at(counts, (np.repeat(np.arange(nb), f ** 3), blocks.reshape(-1).astype(np.int64)), 1)
    counts[:, INVALID] = 0
    # candidate order 1..254 then 0, so argmax's first-max rule encodes the tie policy
    order = np.concatenate([np.arange(1, 255), [0]])
    best = order[np.argmax(counts[:, order], axis=1)]
    best[counts.sum(1) == 0] = INVALID
    return best.astype(labels.dtype).reshape(X // f, Y // f, Z // f)


def upsample_predictions(pred: np.ndarray, factor: int = 2) -> np.ndarray:
    """Nearest-neighbour replication of each voxel into its ``factor**3`` block."""
    out = np.asarray(pred)
    for ax in range(out.ndim - 3, out.ndim):
        out = np.repeat(out, factor, axis=ax)
    return out


# ---------------------------------------------------------------------------
# VGRID files
# ---------------------------------------------------------------------------

VGRID_MAGIC = b"VGRD"
VGRID_VERSION = 1
_DTYPES = {0: np.dtype("<u1"), 1: np.dtype("<u2"), 2: np.dtype("<f4")}
_HEADER = struct.Struct("<4sIIIII4f")


class FormatError(ValueError):
    """A file does not follow its documented on-disk format."""


def write_vgrid(path, values: np.ndarray, spec: SceneSpec | None = None) -> None:
    values = np.asarray(values)
    if values.ndim != 3:
        raise ValueError(f"VGRID payload must be 3-d, got {values.shape}")
    code = {np.dtype("u1"): 0, np.dtype("u2"): 1, np.dtype("f4"): 2}.get(values.dtype.newbyteorder("="))
    if code is None:
        raise ValueError(f"unsupported VGRID dtype {values.dtype}; use uint8, uint16 or float32")
    origin = spec.origin if spec is not None else (0.0, 0.0, 0.0)
    size = spec.voxel_size if spec is not None else 1.0
    header = _HEADER.pack(VGRID_MAGIC, VGRID_VERSION, code, *values.shape, *origin, size)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(values, dtype=_DTYPES[code]).tobytes())


def read_vgrid(path):
    """Return ``(values, spec)``; raises :class:`FormatError` on any defect."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header at offset {len(raw)} (need {_HEADER.size} bytes)")
    magic, version, code, X, Y, Z, ox, oy, oz, s = _HEADER.unpack_from(raw, 0)
    if magic != VGRID_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at offset 0")
    if version != VGRID_VERSION:
        raise FormatError(f"{path}: unsupported VGRID version {version} at offset 4 (expected {VGRID_VERSION})")
    if code not in _DTYPES:
        raise FormatError(f"{path}: unknown dtype code {code} at offset 8")
    dt = _DTYPES[code]
    need = _HEADER.size + X * Y * Z * dt.itemsize
    if len(raw) < need:
        raise FormatError(f"{path}: truncated payload at offset {len(raw)} (expected {need} bytes)")
    if len(raw) > need:
        raise FormatError(f"{path}: {len(raw) - need} trailing bytes after offset {need}")
    values = np.frombuffer(raw, dtype=dt, count=X * Y * Z, offset=_HEADER.size).reshape(X, Y, Z).copy()
    spec = SceneSpec(origin=(ox, oy, oz), voxel_size=s, dims=(X, Y, Z)) if s > 0 else None
    return values, spec
