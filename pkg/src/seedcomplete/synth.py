"""Deterministic synthetic driving scenes.

A scene is a road slab plus axis-aligned boxes (buildings, cars, vegetation)
and vertical cylinders (poles), all snapped to the working voxel grid so that
label downsampling is exact. Depth maps and per-pixel class images are ray
cast from the same solids.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from .camera import CameraModel, back_project_depth, project
from .voxels import INVALID, SceneSpec, centroids, voxelize_points

ROAD, BUILDING, CAR, VEGETATION, POLE = 1, 2, 3, 4, 5
#: later entries overwrite earlier ones when solids overlap
PRIORITY = (ROAD, VEGETATION, BUILDING, CAR, POLE)

_MASK = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15


def _mix(z):
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    """Counter-based SplitMix64 stream; ``stream(seed, purpose)`` keys independent streams."""

    def __init__(self, state: int):
        self.state = int(state) & _MASK

    @classmethod
    def stream(cls, seed: int, purpose: str) -> "SplitMix64":
        key = (int(seed) * 0x2545F4914F6CDD1D + zlib.crc32(purpose.encode())) & _MASK
        with np.errstate(over="ignore"):
            return cls(int(_mix(np.uint64(key))))

    def next_u64(self, n: int) -> np.ndarray:
        with np.errstate(over="ignore"):
            steps = np.arange(1, n + 1, dtype=np.uint64) * np.uint64(_GAMMA)
            out = _mix(steps + np.uint64(self.state))
        self.state = (self.state + n * _GAMMA) & _MASK
        return out

    def uniform(self, n: int = None):
        k = 1 if n is None else n
        u = (self.next_u64(k) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53
        return float(u[0]) if n is None else u

    def integers(self, lo: int, hi: int, n: int = None):
        """Uniform ints in [lo, hi)."""
        u = self.uniform(1 if n is None else n)
        v = lo + np.floor(np.asarray(u) * (hi - lo)).astype(np.int64)
        return int(v[0]) if n is None else v

    def normal(self, n: int) -> np.ndarray:
        m = (n + 1) // 2
        u1 = 1.0 - self.uniform(m)
        u2 = self.uniform(m)
        r = np.sqrt(-2.0 * np.log(u1))
        return np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])[:n]


@dataclass
class Box:
    lo: np.ndarray
    hi: np.ndarray
    cls: int

    @property
    def center(self):
        return (self.lo + self.hi) / 2

    @property
    def size(self):
        return self.hi - self.lo


@dataclass
class Cylinder:
    center: np.ndarray  # xy
    z0: float
    z1: float
    radius: float
    cls: int = POLE


@dataclass
class SceneDescription:
    seed: int
    spec: SceneSpec
    ground_height: float
    ground_class: int = ROAD
    boxes: list = field(default_factory=list)
    cylinders: list = field(default_factory=list)

    def solids(self) -> list:
        ext = self.spec.extent
        ground = Box(ext[0].copy(), np.array([ext[1][0], ext[1][1], self.ground_height]), self.ground_class)
        return [ground] + list(self.boxes) + list(self.cylinders)

    def classes(self) -> set:
        return {s.cls for s in self.solids()}


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

# footprint (x, y) ranges and height range in metres per class
_SHAPES = {
    CAR: ((3.6, 4.4), (1.6, 2.0), (1.4, 1.8)),
    BUILDING: ((4.0, 9.0), (3.0, 6.0), (3.0, 8.0)),
    VEGETATION: ((1.5, 3.5), (1.5, 3.5), (0.8, 3.5)),
}


def generate_scene(seed: int, spec: SceneSpec, difficulty: int = 2) -> SceneDescription:
    """Random scene for an output-resolution ``spec``; fully determined by ``seed``.

    ``difficulty`` scales the object count; 0 gives the ground plane only, and
    any positive value guarantees at least one car plus one other object.
    """
    rng = SplitMix64.stream(seed, "scene")
    cell = 2 * spec.voxel_size  # working voxel
    ext = spec.extent
    ground = ext[0][2] + cell
    desc = SceneDescription(seed=int(seed), spec=spec, ground_height=float(ground))
    if difficulty <= 0:
        return desc
    nx = int(round((ext[1][0] - ext[0][0]) / cell))
    ny = int(round((ext[1][1] - ext[0][1]) / cell))
    nz = int(round((ext[1][2] - ground) / cell))
    taken = np.zeros((nx, ny), dtype=bool)
    x_start = max(1, int(np.ceil(2.5 / cell)))

    def cells(lo_hi):
        lo, hi = lo_hi
        return max(1, int(round((lo + rng.uniform() * (hi - lo)) / cell)))

    def place(fx, fy):
        for _ in range(30):
            if nx - fx <= x_start or ny - fy <= 0:
                return None
            ix = rng.integers(x_start, nx - fx + 1)
            iy = rng.integers(0, ny - fy + 1)
            if not taken[max(ix - 1, 0):ix + fx + 1, max(iy - 1, 0):iy + fy + 1].any():
                taken[ix:ix + fx, iy:iy + fy] = True
                return ix, iy
        return None

    def add_box(cls):
        sx, sy, sz = _SHAPES[cls]
        fx, fy, fz = cells(sx), cells(sy), min(cells(sz), nz)
        if cls == CAR and rng.uniform() < 0.3:
            fx, fy = fy, fx
        spot = place(fx, fy)
        if spot is None:
            return
        lo = np.array([ext[0][0] + spot[0] * cell, ext[0][1] + spot[1] * cell, ground])
        hi = lo + np.array([fx, fy, fz]) * cell
        desc.boxes.append(Box(lo, hi, cls))

    def add_pole():
        spot = place(1, 1)
        if spot is None:
            return
        c = np.array([ext[0][0] + (spot[0] + 0.5) * cell, ext[0][1] + (spot[1] + 0.5) * cell])
        h = min(rng.integers(3, 7), nz)
        desc.cylinders.append(Cylinder(c, ground, ground + h * cell, cell / 2))

    d = int(difficulty)
    add_box(CAR)
    for _ in range(rng.integers(0, 2 * d)):
        add_box(CAR)
    for _ in range(rng.integers(1, d + 2)):
        add_box(BUILDING)
    for _ in range(rng.integers(1, d + 2)):
        add_box(VEGETATION)
    for _ in range(rng.integers(1, d + 2)):
        add_pole()
    return desc


# ---------------------------------------------------------------------------
# rasterisation
# ---------------------------------------------------------------------------

def _inside(solid, pts: np.ndarray) -> np.ndarray:
    if isinstance(solid, Box):
        return np.all((pts >= solid.lo) & (pts < solid.hi), axis=1)
    d2 = ((pts[:, :2] - solid.center) ** 2).sum(1)
    return (d2 < solid.radius ** 2) & (pts[:, 2] >= solid.z0) & (pts[:, 2] < solid.z1)


def rasterize_labels(desc: SceneDescription, spec: SceneSpec, cameras=None, depths=None,
                     invalid_prob: float = 1.0, seed: int | None = None) -> np.ndarray:
    """Per-voxel class of the solid containing each centroid (uint8, X×Y×Z).

    With ``cameras`` (and their ``depths``), voxels that no camera observes,
    i.e. outside every field of view or behind the first visible surface, are
    set to INVALID with probability ``invalid_prob``.
    """
    pts = centroids(spec)
    labels = np.zeros(len(pts), dtype=np.uint8)
    solids = desc.solids()
    for cls in PRIORITY:
        for s in solids:
            if s.cls == cls:
                labels[_inside(s, pts)] = cls
    labels = labels.reshape(spec.dims)
    if cameras is not None and invalid_prob > 0:
        if depths is None:
            depths = [render(desc, c)[0] for c in cameras]
        seen = observed_mask(cameras, depths, spec)
        rng = SplitMix64.stream(desc.seed if seed is None else seed, "invalid")
        drop = (~seen) & (rng.uniform(spec.num_voxels).reshape(spec.dims) < invalid_prob)
        labels[drop] = INVALID
    return labels


def observed_mask(cameras, depths, spec: SceneSpec) -> np.ndarray:
    """Voxels in free space in front of a depth return, or containing one."""
    pts = centroids(spec)
    seen = np.zeros(len(pts), dtype=bool)
    for cam, depth in zip(cameras, depths):
        uv, z, inside = project(pts, cam)
        idx = np.flatnonzero(inside)
        u = np.clip(np.floor(uv[idx, 0] + 0.5).astype(int), 0, cam.width - 1)
        v = np.clip(np.floor(uv[idx, 1] + 0.5).astype(int), 0, cam.height - 1)
        d = depth[v, u]
        seen[idx[(d == 0) | (z[idx] < d)]] = True
        hits = back_project_depth(depth, cam)
        if len(hits):
            # nudge along the viewing ray so face hits fall inside the solid
            rays = hits - cam.center
            hits = hits + 1e-4 * rays / np.linalg.norm(rays, axis=1, keepdims=True)
            seen |= voxelize_points(hits, spec).reshape(-1)
    return seen.reshape(spec.dims)


# ---------------------------------------------------------------------------
# ray casting
# ---------------------------------------------------------------------------

def _camera_rays(cam: CameraModel):
    v, u = np.mgrid[0:cam.height, 0:cam.width]
    pix = np.stack([u.reshape(-1), v.reshape(-1), np.ones(u.size)]).astype(np.float64)
    # camera-frame directions with unit z, so the ray parameter equals camera depth
    d_cam = np.linalg.solve(cam.K, pix)
    return cam.center, (cam.R.T @ d_cam).T


def _hit_box(o, d, box: Box) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (box.lo - o) * inv
        t2 = (box.hi - o) * inv
    tmin = np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2))
    tmax = np.where(np.isnan(t1), np.inf, np.maximum(t1, t2))
    # rays parallel to a slab: inside iff the origin lies between the planes
    par = d == 0
    inside_slab = (o >= box.lo) & (o <= box.hi)
    tmin = np.where(par, np.where(inside_slab, -np.inf, np.inf), tmin)
    tmax = np.where(par, np.where(inside_slab, np.inf, -np.inf), tmax)
    tn = tmin.max(1)
    tf = tmax.min(1)
    ok = (tf >= tn) & (tn > 0)
    return np.where(ok, tn, np.inf)


def _hit_cylinder(o, d, cyl: Cylinder) -> np.ndarray:
    best = np.full(len(d), np.inf)
    ox, oy = o[0] - cyl.center[0], o[1] - cyl.center[1]
    a = d[:, 0] ** 2 + d[:, 1] ** 2
    b = 2 * (ox * d[:, 0] + oy * d[:, 1])
    c = ox ** 2 + oy ** 2 - cyl.radius ** 2
    disc = b * b - 4 * a * c
    ok = (a > 0) & (disc >= 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        t = (-b - np.sqrt(np.where(ok, disc, 0))) / (2 * np.where(a > 0, a, 1))
    z = o[2] + t * d[:, 2]
    side = ok & (t > 0) & (z >= cyl.z0) & (z <= cyl.z1)
    best = np.where(side, t, best)
    for zc in (cyl.z0, cyl.z1):
        # rays with d_z = 0 give inf/nan here and are masked out below
        with np.errstate(divide="ignore", invalid="ignore"):
            tc = (zc - o[2]) / d[:, 2]
            px = ox + tc * d[:, 0]
            py = oy + tc * d[:, 1]
            cap = (d[:, 2] != 0) & (tc > 0) & (px ** 2 + py ** 2 <= cyl.radius ** 2)
        best = np.where(cap & (tc < best), tc, best)
    return best


def render(desc: SceneDescription, cam: CameraModel):
    """Depth map (camera z, 0 = no hit) and class image of the nearest solid."""
    o, d = _camera_rays(cam)
    depth = np.full(len(d), np.inf)
    cls = np.zeros(len(d), dtype=np.uint8)
    for solid in desc.solids():
        t = _hit_box(o, d, solid) if isinstance(solid, Box) else _hit_cylinder(o, d, solid)
        closer = t < depth
        depth[closer] = t[closer]
        cls[closer] = solid.cls
    depth[~np.isfinite(depth)] = 0.0
    shape = (cam.height, cam.width)
    return depth.reshape(shape), cls.reshape(shape)


def render_depth(desc: SceneDescription, cam: CameraModel) -> np.ndarray:
    return render(desc, cam)[0]


def surface_distance(desc: SceneDescription, points: np.ndarray) -> np.ndarray:
    """Distance from each point to the nearest solid surface."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    best = np.full(len(pts), np.inf)
    for s in desc.solids():
        if isinstance(s, Box):
            q = np.maximum(s.lo - pts, pts - s.hi)
            outside = np.linalg.norm(np.maximum(q, 0), axis=1)
            inside = -np.minimum(q.max(1), 0)
            dist = np.where(q.max(1) > 0, outside, inside)
        else:
            r = np.linalg.norm(pts[:, :2] - s.center, axis=1)
            dr = r - s.radius
            dz = np.maximum(s.z0 - pts[:, 2], pts[:, 2] - s.z1)
            outside = np.hypot(np.maximum(dr, 0), np.maximum(dz, 0))
            inside = -np.maximum(dr, dz)
            dist = np.where((dr > 0) | (dz > 0), outside, inside)
        best = np.minimum(best, dist)
    return best
