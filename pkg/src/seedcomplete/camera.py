"""Pinhole cameras, field-of-view masks, depth back-projection and the
image-to-voxel feature lifting.

Pixel ``(u, v)`` is the continuous image coordinate of column ``u`` / row
``v``; a point is inside the image when ``0 <= u < width`` and
``0 <= v < height``.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .autodiff import Tensor, ops
from .voxels import FormatError, SceneSpec, centroids


@dataclass
class CameraModel:
    K: np.ndarray
    T: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        self.T = np.asarray(self.T, dtype=np.float64).reshape(3, 4)
        self.width = int(self.width)
        self.height = int(self.height)
        if not np.allclose(self.K[2], [0, 0, 1]):
            raise ValueError(f"intrinsics last row must be [0, 0, 1], got {self.K[2]}")
        if self.K[0, 0] <= 0 or self.K[1, 1] <= 0:
            raise ValueError("focal lengths must be positive")
        R = self.T[:, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6):
            raise ValueError("extrinsic rotation block is not orthonormal")

    @property
    def R(self) -> np.ndarray:
        return self.T[:, :3]

    @property
    def t(self) -> np.ndarray:
        return self.T[:, 3]

    @property
    def center(self) -> np.ndarray:
        """Camera centre in world coordinates."""
        return -self.R.T @ self.t

    @classmethod
    def looking_along_x(cls, position, f: float, width: int, height: int) -> "CameraModel":
        """Forward-facing camera (world x forward, y left, z up) at ``position``."""
        R = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
        c = np.asarray(position, dtype=np.float64)
        T = np.concatenate([R, (-R @ c)[:, None]], axis=1)
        K = np.array([[f, 0.0, width / 2.0], [0.0, f, height / 2.0], [0.0, 0.0, 1.0]])
        return cls(K, T, width, height)


def project(points, cam: CameraModel):
    """Map world points to ``(uv, depth, in_fov)``; points behind the camera are flagged."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    pc = pts @ cam.R.T + cam.t
    depth = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        proj = pc @ cam.K.T
        uv = proj[:, :2] / proj[:, 2:3]
    in_fov = (
        (depth > 0)
        & (uv[:, 0] >= 0) & (uv[:, 0] < cam.width)
        & (uv[:, 1] >= 0) & (uv[:, 1] < cam.height)
    )
    return uv, depth, in_fov


def fov_mask(cam: CameraModel, spec: SceneSpec, pose=None) -> np.ndarray:
    """Boolean (X, Y, Z) mask of voxels whose centroid projects into the image."""
    _, _, inside = project(_grid_points(spec, pose), cam)
    return inside.reshape(spec.dims)


def back_project_depth(depth, cam: CameraModel, stride: int = 1) -> np.ndarray:
    """Lift every ``stride``-th pixel with positive depth to a world point."""
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != (cam.height, cam.width):
        raise ValueError(f"depth map {depth.shape} does not match camera {(cam.height, cam.width)}")
    if abs(np.linalg.det(cam.K)) < 1e-12:
        raise np.linalg.LinAlgError("intrinsic matrix is singular")
    v, u = np.mgrid[0:cam.height:stride, 0:cam.width:stride]
    d = depth[v, u]
    keep = np.isfinite(d) & (d > 0)
    u, v, d = u[keep], v[keep], d[keep]
    rays = np.linalg.solve(cam.K, np.stack([u, v, np.ones_like(u)]).astype(np.float64))
    pc = rays * (d / rays[2])
    return ((pc.T - cam.t) @ cam.R)


def _grid_points(spec: SceneSpec, pose) -> np.ndarray:
    pts = centroids(spec)
    if pose is not None:
        pose = np.asarray(pose, dtype=np.float64)
        pts = pts @ pose[:3, :3].T + pose[:3, 3]
    return pts


# ---------------------------------------------------------------------------
# view transformation
# ---------------------------------------------------------------------------

def hit_counts(cams: Sequence[CameraModel], spec: SceneSpec, pose=None) -> np.ndarray:
    """Number of frames whose field of view contains each voxel centroid."""
    return sum(fov_mask(c, spec, pose).astype(np.int64) for c in cams)


def hit_weights(delta: np.ndarray) -> np.ndarray:
    """``1/delta`` where ``delta > 0`` and 1 elsewhere."""
    delta = np.asarray(delta)
    return np.where(delta > 0, 1.0 / np.maximum(delta, 1), 1.0)


def feature_coords(uv: np.ndarray, stride: float) -> np.ndarray:
    """Pixel coordinates to feature-map coordinates, aligned on cell centres.

    Feature cell ``j`` pools pixels ``j*stride .. (j+1)*stride - 1`` and is
    sampled at their mean coordinate.
    """
    return (uv - (stride - 1) / 2.0) / stride


def view_sampling_matrix(cams: Sequence[CameraModel], spec: SceneSpec, feat_hw, pose=None):
    """Sparse [V, N_t*Hf*Wf] matrix of bilinear taps already scaled by 1/delta."""
    Hf, Wf = feat_hw
    pts = _grid_points(spec, pose)
    V = len(pts)
    rows, cols, vals = [], [], []
    delta = np.zeros(V, dtype=np.int64)
    per_frame = []
    for t, cam in enumerate(cams):
        uv, _, inside = project(pts, cam)
        delta += inside
        per_frame.append((t, cam, uv, inside))
    weight = hit_weights(delta)
    for t, cam, uv, inside in per_frame:
        stride_x = cam.width / Wf
        stride_y = cam.height / Hf
        vox = np.flatnonzero(inside)
        fx = np.clip(feature_coords(uv[vox, 0], stride_x), 0, Wf - 1)
        fy = np.clip(feature_coords(uv[vox, 1], stride_y), 0, Hf - 1)
        x0 = np.minimum(np.floor(fx).astype(np.int64), max(Wf - 2, 0))
        y0 = np.minimum(np.floor(fy).astype(np.int64), max(Hf - 2, 0))
        wx = fx - x0
        wy = fy - y0
        x1 = np.minimum(x0 + 1, Wf - 1)
        y1 = np.minimum(y0 + 1, Hf - 1)
        base = t * Hf * Wf
        for yy, xx, w in (
            (y0, x0, (1 - wy) * (1 - wx)),
            (y0, x1, (1 - wy) * wx),
            (y1, x0, wy * (1 - wx)),
            (y1, x1, wy * wx),
        ):
            rows.append(vox)
            cols.append(base + yy * Wf + xx)
            vals.append(w * weight[vox])
    n = len(cams) * Hf * Wf
    if rows:
        mat = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(V, n)
        ).tocsr()
    else:
        mat = sp.csr_matrix((V, n))
    mat.sum_duplicates()
    return mat, delta.reshape(spec.dims)


def view_transform(feats: Tensor, cams: Sequence[CameraModel], spec: SceneSpec, pose=None,
                   matrix=None) -> Tensor:
    """Lift [N_t, C, Hf, Wf] image features into a [C, X, Y, Z] voxel volume.

    Each voxel averages the bilinear samples from the frames that see it;
    voxels seen by no frame are zero. ``matrix`` may be a cached result of
    :func:`view_sampling_matrix`.
    """
    Nt, C, Hf, Wf = feats.shape
    if Nt != len(cams):
        raise ValueError(f"{Nt} feature maps for {len(cams)} cameras")
    if matrix is None:
        matrix, _ = view_sampling_matrix(cams, spec, (Hf, Wf), pose)
    flat = ops.reshape(ops.transpose(feats, (1, 0, 2, 3)), (C, Nt * Hf * Wf))
    return ops.reshape(ops.sparse_matmul(flat, matrix), (C,) + spec.dims)


# ---------------------------------------------------------------------------
# camera text files
# ---------------------------------------------------------------------------

def format_camera(cam: CameraModel) -> str:
    k = " ".join(repr(float(v)) for v in cam.K.reshape(-1))
    t = " ".join(repr(float(v)) for v in cam.T.reshape(-1))
    return f"K {k}\nT {t}\nSIZE {cam.width} {cam.height}\n"


def parse_cameras(text: str, source: str = "<text>") -> list:
    lines = [ln.split() for ln in text.splitlines() if ln.strip()]
    if len(lines) % 3:
        raise FormatError(f"{source}: expected blocks of 3 lines, got {len(lines)} lines")
    cams = []
    for b in range(0, len(lines), 3):
        k, t, size = lines[b:b + 3]
        if k[0] != "K" or len(k) != 10:
            raise FormatError(f"{source}: line {b + 1} must be 'K' + 9 floats")
        if t[0] != "T" or len(t) != 13:
            raise FormatError(f"{source}: line {b + 2} must be 'T' + 12 floats")
        if size[0] != "SIZE" or len(size) != 3:
            raise FormatError(f"{source}: line {b + 3} must be 'SIZE width height'")
        try:
            cams.append(CameraModel(np.array(k[1:], float), np.array(t[1:], float), int(size[1]), int(size[2])))
        except ValueError as exc:
            raise FormatError(f"{source}: camera block at line {b + 1}: {exc}") from exc
    return cams


def write_camera(path, cam: CameraModel) -> None:
    Path(path).write_text(format_camera(cam))


def read_camera(path) -> CameraModel:
    cams = parse_cameras(Path(path).read_text(), str(path))
    if len(cams) != 1:
        raise FormatError(f"{path}: expected one camera block, found {len(cams)}")
    return cams[0]
