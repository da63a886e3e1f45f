"""Completion IoU, semantic mIoU and range-restricted variants."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .voxels import CLASS_NAMES, INVALID, SceneSpec

DEFAULT_RANGES = (12.8, 25.6, 51.2)


@dataclass
class ConfusionCounts:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray

    def iou(self) -> np.ndarray:
        """TP / (TP + FP + FN) per class; NaN where the denominator is zero."""
        den = self.tp + self.fp + self.fn
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(den > 0, self.tp / np.maximum(den, 1), np.nan)


def confusion_counts(pred, gt, n_classes: int) -> ConfusionCounts:
    pred = np.asarray(pred).reshape(-1).astype(np.int64)
    gt = np.asarray(gt).reshape(-1).astype(np.int64)
    valid = gt != INVALID
    p, g = pred[valid], gt[valid]
    cm = np.bincount(g * n_classes + p, minlength=n_classes * n_classes).reshape(n_classes, n_classes)
    tp = np.diag(cm).astype(np.int64)
    fp = cm.sum(0) - tp
    fn = cm.sum(1) - tp
    tn = len(g) - tp - fp - fn
    return ConfusionCounts(tp, fp, fn, tn)


def iou_miou(pred, gt, n_classes: int) -> dict:
    """Occupancy IoU, mean IoU over non-empty classes, and per-class IoU.

    Classes absent from both prediction and ground truth are left out of the mean.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    counts = confusion_counts(pred, gt, n_classes)
    per_class = counts.iou()
    semantic = per_class[1:]
    present = ~np.isnan(semantic)
    miou = float(semantic[present].mean()) if present.any() else math.nan
    valid = gt != INVALID
    occ_p = (pred != 0) & valid
    occ_g = (gt != 0) & valid
    union = int((occ_p | occ_g).sum())
    iou = float((occ_p & occ_g).sum() / union) if union else math.nan
    return {"iou": iou, "miou": miou, "per_class": per_class, "counts": counts}


def range_crop(grid: np.ndarray, spec: SceneSpec, r: float) -> np.ndarray:
    """Voxels whose x-extent lies inside [0, r] metres of the forward axis."""
    n = int(np.floor((r - spec.origin[0]) / spec.voxel_size + 1e-9))
    n = min(max(n, 0), spec.dims[0])
    return np.asarray(grid)[:n]


def range_metrics(pred, gt, spec: SceneSpec, n_classes: int, ranges=DEFAULT_RANGES) -> dict:
    return {float(r): iou_miou(range_crop(pred, spec, r), range_crop(gt, spec, r), n_classes) for r in ranges}


def format_report(metrics: dict, class_names: dict = CLASS_NAMES, ranged: dict | None = None) -> str:
    """Line-oriented ``name value`` report (per-class IoU, IoU, mIoU, range blocks)."""
    lines = []
    for c, v in enumerate(metrics["per_class"]):
        if c == 0:
            continue
        lines.append(f"{class_names.get(c, f'class{c}')} {_fmt(v)}")
    lines.append(f"IoU {_fmt(metrics['iou'])}")
    lines.append(f"mIoU {_fmt(metrics['miou'])}")
    for r, m in (ranged or {}).items():
        lines.append(f"range {r:g}")
        lines.append(f"IoU@{r:g} {_fmt(m['iou'])}")
        lines.append(f"mIoU@{r:g} {_fmt(m['miou'])}")
    return "\n".join(lines) + "\n"


def format_records(metrics: dict, class_names: dict = CLASS_NAMES, ranged: dict | None = None) -> str:
    """Machine-readable ``key=value`` records of the same report."""
    recs = [f"iou={_fmt(metrics['iou'])}", f"miou={_fmt(metrics['miou'])}"]
    for c, v in enumerate(metrics["per_class"]):
        if c:
            recs.append(f"iou.{class_names.get(c, f'class{c}')}={_fmt(v)}")
    for r, m in (ranged or {}).items():
        recs.append(f"iou@{r:g}={_fmt(m['iou'])}")
        recs.append(f"miou@{r:g}={_fmt(m['miou'])}")
    return "\n".join(recs) + "\n"


def _fmt(v) -> str:
    return "nan" if v is None or (isinstance(v, float) and math.isnan(v)) or (np.ndim(v) == 0 and np.isnan(v)) else f"{float(v):.6f}"
