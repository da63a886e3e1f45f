"""Samples (camera frames + depth + labels) and their on-disk layout.

Layout of a dataset directory::

    scenes/<id>/cam_<t>.txt        camera text block
    scenes/<id>/depth_<t>.vgrd     float32 depth, dims (width, height, 1)
    scenes/<id>/semantic_<t>.vgrd  uint8 per-pixel class image, same dims
    scenes/<id>/labels.vgrd        uint8 labels at output resolution
    scenes/<id>/meta.txt           key=value lines
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import CameraModel, read_camera, write_camera
from .synth import generate_scene, rasterize_labels, render
from .voxels import FormatError, SceneSpec, read_vgrid, write_vgrid

FRAME_STEP = 0.5  # metres between successive historical frames along -x
CAMERA_HEIGHT = 1.6  # metres above the road surface


@dataclass
class Sample:
    scene_id: str
    spec: SceneSpec
    cameras: list
    depths: list
    semantics: list
    labels: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def n_frames(self) -> int:
        return len(self.cameras)


def frame_cameras(spec: SceneSpec, n_frames: int, width: int, height: int, focal: float | None = None):
    """Frame 0 at the grid's near edge; frame t sits ``t * FRAME_STEP`` behind it."""
    focal = width / 2.0 if focal is None else focal
    ext = spec.extent
    z = ext[0][2] + 2 * spec.voxel_size + CAMERA_HEIGHT
    y = (ext[0][1] + ext[1][1]) / 2
    return [
        CameraModel.looking_along_x((ext[0][0] - FRAME_STEP * t, y, z), focal, width, height)
        for t in range(n_frames)
    ]


def make_sample(seed: int, spec: SceneSpec, n_frames: int = 1, width: int = 128, height: int = 64,
                difficulty: int = 2, invalid_prob: float = 1.0, scene_id: str | None = None) -> Sample:
    desc = generate_scene(seed, spec, difficulty)
    cams = frame_cameras(spec, n_frames, width, height)
    rendered = [render(desc, c) for c in cams]
    # stored as float32 on disk; round now so in-memory and reloaded samples agree
    depths = [r[0].astype(np.float32).astype(np.float64) for r in rendered]
    sems = [r[1] for r in rendered]
    labels = rasterize_labels(desc, spec, cams, depths, invalid_prob=invalid_prob)
    meta = {
        "seed": str(seed),
        "spec": spec.format(),
        "N_t": str(n_frames),
        "difficulty": str(difficulty),
        "invalid_prob": repr(float(invalid_prob)),
    }
    return Sample(scene_id or f"{seed:06d}", spec, cams, depths, sems, labels, meta)


def write_sample(path, sample: Sample) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for t, (cam, depth, sem) in enumerate(zip(sample.cameras, sample.depths, sample.semantics)):
        write_camera(path / f"cam_{t}.txt", cam)
        write_vgrid(path / f"depth_{t}.vgrd", np.asarray(depth, np.float32).T[:, :, None])
        write_vgrid(path / f"semantic_{t}.vgrd", np.asarray(sem, np.uint8).T[:, :, None])
    write_vgrid(path / "labels.vgrd", np.asarray(sample.labels, np.uint8), sample.spec)
    meta = dict(sample.meta)
    meta.setdefault("spec", sample.spec.format())
    meta["N_t"] = str(sample.n_frames)
    meta["id"] = sample.scene_id
    (path / "meta.txt").write_text("".join(f"{k}={v}\n" for k, v in sorted(meta.items())))


def read_meta(path) -> dict:
    meta = {}
    for i, line in enumerate(Path(path).read_text().splitlines()):
        if not line.strip():
            continue
        if "=" not in line:
            raise FormatError(f"{path}: line {i + 1} is not key=value")
        k, v = line.split("=", 1)
        meta[k.strip()] = v.strip()
    return meta


def read_sample(path) -> Sample:
    path = Path(path)
    meta = read_meta(path / "meta.txt")
    try:
        spec = SceneSpec.parse(meta["spec"])
        n = int(meta["N_t"])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path / 'meta.txt'}: bad or missing field ({exc})") from exc
    cams, depths, sems = [], [], []
    for t in range(n):
        cam = read_camera(path / f"cam_{t}.txt")
        depth, _ = read_vgrid(path / f"depth_{t}.vgrd")
        sem, _ = read_vgrid(path / f"semantic_{t}.vgrd")
        if depth.shape != (cam.width, cam.height, 1) or sem.shape != depth.shape:
            raise FormatError(f"{path}: frame {t} image dims do not match camera SIZE")
        cams.append(cam)
        depths.append(depth[:, :, 0].T.astype(np.float64))
        sems.append(sem[:, :, 0].T.copy())
    labels, _ = read_vgrid(path / "labels.vgrd")
    if labels.shape != spec.dims:
        raise FormatError(f"{path}: labels dims {labels.shape} != spec dims {spec.dims}")
    return Sample(meta.get("id", path.name), spec, cams, depths, sems, labels, meta)


def generate_dataset(out, seed: int, count: int, spec: SceneSpec, **kwargs) -> list:
    out = Path(out)
    ids = []
    for i in range(count):
        s = seed + i
        sample = make_sample(s, spec, scene_id=f"{i:04d}", **kwargs)
        sample.meta["base_seed"] = str(seed)
        write_sample(out / "scenes" / sample.scene_id, sample)
        ids.append(sample.scene_id)
    return ids


def list_scenes(root) -> list:
    root = Path(root)
    scenes = root / "scenes"
    if not scenes.is_dir():
        raise FormatError(f"{root}: no scenes/ directory")
    return sorted(p for p in scenes.iterdir() if p.is_dir())


def load_dataset(root) -> list:
    return [read_sample(p) for p in list_scenes(root)]
