"""End-to-end network: image features are lifted into the working grid,
occupancy proposals pick seed voxels, the seeds are encoded sparsely and
then diffused back over the dense grid."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, no_grad, ops
from .autodiff.nn import Conv2d, InstanceNorm, Module
from .camera import back_project_depth, view_sampling_matrix, view_transform
from .config import ConfigError, ModelConfig
from .diffusion import MSSD, VoxelAggregation
from .guidance import GeometryHead, SemanticGuidance, seed_labels
from .losses import LossReport, bce_loss, occupancy_target, sem_loss, ssc_loss
from .proposal import CoarseOccupancy, OccupancyOutput, OccupancyRefiner, densify, point_voxels, select_seeds
from .sparse import SparseContext
from .synth import SplitMix64
from .voxels import INVALID, downsample_labels, upsample_predictions


class ImageEncoder(Module):
    """Stride-2 conv stages with instance norm, then a 1x1 projection to ``channels``."""

    def __init__(self, cin: int, widths, channels: int, rng):
        self.stages = []
        self.norms = []
        prev = cin
        for w in widths:
            self.stages.append(Conv2d(prev, w, rng, 3, stride=2))
            self.norms.append(InstanceNorm(w))
            prev = w
        self.proj = Conv2d(prev, channels, rng, 1)

    def forward(self, x: Tensor) -> Tensor:
        for conv, norm in zip(self.stages, self.norms):
            x = ops.relu(norm(conv(x)))
        return self.proj(x)


@dataclass
class PreparedSample:
    """Everything about a sample that does not depend on the weights."""

    scene_id: str
    images: np.ndarray  # [N_t, C_class + 1, H, W]
    cameras: list
    view_matrix: object
    hit_count: np.ndarray
    point_coords: np.ndarray
    point_feats: np.ndarray
    point_ctx: SparseContext
    labels: np.ndarray  # output resolution
    work_labels: np.ndarray
    occ_target: np.ndarray
    valid: np.ndarray


def noisy_depth(depth: np.ndarray, sigma: float, seed: int, frame: int) -> np.ndarray:
    """Depth with fixed additive Gaussian noise on valid pixels; misses stay 0."""
    depth = np.asarray(depth, dtype=np.float64)
    if sigma == 0:
        return depth.copy()
    noise = SplitMix64.stream(seed, f"depth-noise/{frame}").normal(depth.size).reshape(depth.shape)
    out = np.where(depth > 0, depth + sigma * noise, 0.0)
    return np.where(out > 0, out, 0.0)


def encoder_input(semantic: np.ndarray, depth: np.ndarray, n_classes: int, depth_scale: float) -> np.ndarray:
    """Per-pixel class one-hot followed by a scaled depth channel."""
    sem = np.asarray(semantic, dtype=np.int64)
    if sem.max(initial=0) >= n_classes:
        raise ConfigError(f"semantic image holds class {int(sem.max())} but n_classes={n_classes}")
    onehot = (sem[None] == np.arange(n_classes)[:, None, None]).astype(np.float64)
    return np.concatenate([onehot, (np.asarray(depth) / depth_scale)[None]], axis=0)


def prepare(sample, config: ModelConfig) -> PreparedSample:
    spec = config.output_spec
    if sample.spec != spec:
        raise ConfigError(f"sample {sample.scene_id} grid {sample.spec.format()} != config grid {spec.format()}")
    if sample.n_frames < config.n_frames:
        raise ConfigError(f"sample {sample.scene_id} has {sample.n_frames} frames, config needs {config.n_frames}")
    work = config.working_spec
    cams = sample.cameras[:config.n_frames]
    seed = int(sample.meta.get("seed", 0))
    depths = [noisy_depth(d, config.depth_noise, seed, t) for t, d in enumerate(sample.depths[:config.n_frames])]
    scale = float(spec.extent[1][0] - spec.extent[0][0])
    images = np.stack([encoder_input(s, d, config.n_classes, scale)
                       for s, d in zip(sample.semantics[:config.n_frames], depths)])
    step = 2 ** len(config.encoder_widths)
    H, W = images.shape[2:]
    if H % step or W % step:
        raise ConfigError(f"image size {W}x{H} not divisible by {step}")
    matrix, delta = view_sampling_matrix(cams, work, (H // step, W // step))
    points = np.concatenate([back_project_depth(d, c) for d, c in zip(depths, cams)])
    vox = point_voxels(points, work)
    labels = np.asarray(sample.labels)
    if (labels[labels != INVALID] >= config.n_classes).any():
        raise ConfigError(f"labels exceed n_classes={config.n_classes}")
    work_labels = downsample_labels(labels, 2)
    occ, valid = occupancy_target(work_labels)
    return PreparedSample(sample.scene_id, images, cams, matrix, delta, vox.coords, vox.feats,
                          SparseContext(vox.coords, work.dims), labels, work_labels, occ, valid)


@dataclass
class ScenePrediction:
    logits: Tensor  # [C_class, X, Y, Z] at working resolution
    occupancy: OccupancyOutput
    seed_coords: np.ndarray
    seed_logits: Tensor | None
    geo_logits: Tensor | None

    @property
    def labels(self) -> np.ndarray:
        """Arg-max classes at output resolution."""
        return upsample_predictions(np.argmax(self.logits.data, axis=0).astype(np.uint8), 2)

    @property
    def n_seeds(self) -> int:
        return len(self.seed_coords)


class SSCNet(Module):
    def __init__(self, config: ModelConfig):
        rng = np.random.default_rng(config.seed)
        C, Co, K = config.channels, config.occ_channels, config.n_classes
        self.config = config
        self.encoder = ImageEncoder(K + 1, config.encoder_widths, C, rng)
        self.coarse = CoarseOccupancy(C, rng)
        self.refiner = OccupancyRefiner(rng, config.refiner_widths, Co)
        self.geometry = GeometryHead(C, rng)
        self.guidance = SemanticGuidance(C, K, rng)
        self.aggregation = VoxelAggregation(C, Co, rng)
        self.diffusion = MSSD(C + Co, K, rng, depth=config.mssd_depth, aspp_branch=config.aspp_branch)

    def forward(self, prep: PreparedSample, mode: str = "train") -> ScenePrediction:
        if mode not in ("train", "infer"):
            raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
        cfg = self.config
        dt = np.dtype(cfg.dtype).type
        work = cfg.working_spec
        train = mode == "train"

        feats2d = self.encoder(Tensor(prep.images.astype(dt)))
        volume = view_transform(feats2d, prep.cameras, work, matrix=prep.view_matrix)

        coarse = self.coarse(Tensor(prep.point_feats.astype(dt)), prep.point_ctx)
        occ = self.refiner(densify(coarse, prep.point_coords, work.dims))
        with no_grad():
            occ_prob = ops.sigmoid(occ.logits).data
        coords, seed_feats = select_seeds(occ_prob, volume, cfg.threshold)

        want_head = train and cfg.semantic_guidance
        fused, seed_logits = self.guidance(seed_feats, SparseContext(coords, work.dims), with_head=want_head)
        geo_logits = self.geometry(volume) if train else None

        grid = self.aggregation(fused, coords, volume, occ.features)
        logits = self.diffusion.logits(grid)
        return ScenePrediction(logits, occ, coords, seed_logits, geo_logits)

    def predict(self, prep: PreparedSample) -> ScenePrediction:
        with no_grad():
            return self.forward(prep, "infer")


def compute_losses(pred: ScenePrediction, prep: PreparedSample, config: ModelConfig) -> LossReport:
    l_geo = bce_loss(ops.sigmoid(pred.geo_logits), prep.occ_target, prep.valid)
    l_occ = bce_loss(pred.occupancy.probs, prep.occ_target, prep.valid)
    if config.semantic_guidance and pred.seed_logits is not None and pred.n_seeds:
        l_sem = sem_loss(pred.seed_logits, seed_labels(prep.work_labels, pred.seed_coords))
    else:
        l_sem = ops.mul(ops.sum(pred.logits), 0.0)
    l_ssc = ssc_loss(pred.logits, prep.work_labels)
    return LossReport(l_geo, l_occ, l_sem, l_ssc)
