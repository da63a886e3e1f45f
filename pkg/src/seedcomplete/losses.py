"""Training objectives.

Every loss takes INVALID-marked labels and ignores those entries. A loss with
no valid entries evaluates to zero and passes zero gradient.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, ops
from .autodiff.tensor import make_result
from .voxels import INVALID

log = logging.getLogger(__name__)

EPS = 1e-7
RATIO_FLOOR = 1e-12


def _zero_like(x: Tensor) -> Tensor:
    return ops.mul(ops.sum(x), 0.0)


def bce_loss(probs: Tensor, targets, mask=None) -> Tensor:
    """Mean binary cross-entropy over masked entries, probabilities clamped to [EPS, 1-EPS]."""
    y = np.asarray(targets, dtype=probs.dtype).reshape(probs.shape)
    m = np.ones(probs.shape, bool) if mask is None else np.asarray(mask, bool).reshape(probs.shape)
    n = int(m.sum())
    if n == 0:
        log.warning("bce_loss: empty mask, returning zero loss")
        return _zero_like(probs)
    p = ops.clamp(probs, EPS, 1 - EPS)
    w_pos = Tensor((y * m) / n, dtype=probs.dtype)
    w_neg = Tensor(((1 - y) * m) / n, dtype=probs.dtype)
    pos = ops.sum(ops.mul(ops.log(p), w_pos))
    neg = ops.sum(ops.mul(ops.log(ops.sub(1.0, p)), w_neg))
    return ops.neg(ops.add(pos, neg))


def ce_loss(logits: Tensor, labels) -> Tensor:
    """Mean negative log-softmax at the true class; logits are [C, N...]."""
    C = logits.shape[0]
    flat = ops.reshape(logits, (C, -1))
    labels = np.asarray(labels).reshape(-1)
    valid = np.flatnonzero(labels != INVALID)
    if len(valid) == 0:
        log.warning("ce_loss: no valid labels, returning zero loss")
        return _zero_like(logits)
    if labels[valid].max() >= C:
        raise ValueError(f"label {int(labels[valid].max())} out of range for {C} classes")
    ls = ops.log_softmax(flat, axis=0)
    picked = ops.getitem(ls, (labels[valid].astype(np.int64), valid))
    return ops.neg(ops.mean(picked))


# ---------------------------------------------------------------------------
# Lovasz-softmax
# ---------------------------------------------------------------------------

def lovasz_grad(gt_sorted: np.ndarray) -> np.ndarray:
    """Gradient of the Jaccard loss extension w.r.t. sorted errors."""
    gts = gt_sorted.sum()
    inter = gts - np.cumsum(gt_sorted)
    union = gts + np.cumsum(1.0 - gt_sorted)
    jac = 1.0 - inter / union
    if len(gt_sorted) > 1:
        jac[1:] = jac[1:] - jac[:-1]
    return jac


def lovasz_softmax(probs: Tensor, labels) -> Tensor:
    """Lovasz extension of the per-class Jaccard loss, averaged over present classes."""
    C = probs.shape[0]
    flat = probs.data.reshape(C, -1)
    labels = np.asarray(labels).reshape(-1)
    valid = np.flatnonzero(labels != INVALID)
    present = np.unique(labels[valid]) if len(valid) else np.zeros(0, np.int64)
    if len(present) == 0:
        return _zero_like(probs)
    total = 0.0
    grad = np.zeros_like(flat, dtype=np.float64)
    for c in present:
        fg = (labels[valid] == c).astype(np.float64)
        p = flat[c, valid].astype(np.float64)
        err = np.abs(fg - p)
        perm = np.argsort(-err, kind="stable")
        g = lovasz_grad(fg[perm])
        total += float(err[perm] @ g)
        dp = np.empty_like(p)
        dp[perm] = g
        grad[c, valid] += dp * np.where(fg > 0, -1.0, 1.0)
    k = len(present)
    value = np.asarray(total / k, dtype=probs.dtype)
    grad = (grad / k).astype(probs.dtype).reshape(probs.shape)
    return make_result(value, (probs,), lambda g: (g * grad,), "lovasz_softmax")


# ---------------------------------------------------------------------------
# scene-class affinity
# ---------------------------------------------------------------------------

def _neglog_ratio(num: Tensor, den: float | Tensor) -> Tensor:
    r = ops.div(num, den) if isinstance(den, Tensor) else ops.mul(num, 1.0 / den)
    return ops.neg(ops.log(ops.clamp(r, RATIO_FLOOR, 1.0)))


def _affinity_terms(p: Tensor, y: np.ndarray, w: np.ndarray) -> Tensor | None:
    """-log precision - log recall - log specificity for one class.

    ``p`` holds probabilities for every entry, ``y`` the 0/1 target and ``w``
    the validity mask; terms with a zero denominator are skipped.
    """
    dt = p.dtype
    yw = Tensor(y * w, dtype=dt)
    nw = Tensor((1 - y) * w, dtype=dt)
    tp = ops.sum(ops.mul(p, yw))
    p_sum = ops.sum(ops.mul(p, Tensor(w, dtype=dt)))
    terms = []
    if p_sum.data > 0:
        terms.append(_neglog_ratio(tp, p_sum))
    n_pos = float((y * w).sum())
    if n_pos > 0:
        terms.append(_neglog_ratio(tp, n_pos))
    n_neg = float(((1 - y) * w).sum())
    if n_neg > 0:
        tn = ops.sub(n_neg, ops.sum(ops.mul(p, nw)))
        terms.append(_neglog_ratio(tn, n_neg))
    if not terms:
        return None
    out = terms[0]
    for t in terms[1:]:
        out = ops.add(out, t)
    return out


def scal_loss(probs: Tensor, labels, mode: str = "sem") -> Tensor:
    """Scene-class affinity loss on [C, N...] class probabilities.

    ``sem``: mean over classes with at least one valid positive.
    ``geo``: one binary class, non-empty probability ``1 - p_empty``.
    """
    C = probs.shape[0]
    flat = ops.reshape(probs, (C, -1))
    labels = np.asarray(labels).reshape(-1)
    w = (labels != INVALID).astype(np.float64)
    if w.sum() == 0:
        return _zero_like(probs)
    if mode == "geo":
        nonempty = ops.sub(1.0, ops.getitem(flat, 0))
        y = ((labels != 0) & (labels != INVALID)).astype(np.float64)
        out = _affinity_terms(nonempty, y, w)
        return out if out is not None else _zero_like(probs)
    if mode != "sem":
        raise ValueError(f"unknown SCAL mode {mode!r}")
    losses = []
    for c in range(C):
        y = (labels == c).astype(np.float64) * w
        if y.sum() == 0:
            continue
        t = _affinity_terms(ops.getitem(flat, c), y, w)
        if t is not None:
            losses.append(t)
    if not losses:
        return _zero_like(probs)
    out = losses[0]
    for t in losses[1:]:
        out = ops.add(out, t)
    return ops.mul(out, 1.0 / len(losses))


def ssc_terms(logits: Tensor, labels) -> dict:
    """The three final-prediction terms from class scores [C, X, Y, Z]."""
    probs = ops.softmax(logits, axis=0)
    return {
        "scal_sem": scal_loss(probs, labels, "sem"),
        "scal_geo": scal_loss(probs, labels, "geo"),
        "ce": ce_loss(logits, labels),
    }


def ssc_loss(logits: Tensor, labels) -> Tensor:
    t = ssc_terms(logits, labels)
    return ops.add(ops.add(t["scal_sem"], t["scal_geo"]), t["ce"])


def sem_loss(seed_logits: Tensor, seed_labels) -> Tensor:
    """Cross-entropy plus Lovasz-softmax on seed predictions."""
    probs = ops.softmax(seed_logits, axis=0) if seed_logits.shape[1] else seed_logits
    return ops.add(ce_loss(seed_logits, seed_labels), lovasz_softmax(probs, seed_labels))


def occupancy_target(labels: np.ndarray):
    """(binary occupancy, validity mask) from a label grid."""
    labels = np.asarray(labels)
    valid = labels != INVALID
    return ((labels != 0) & valid).astype(np.float64), valid


@dataclass
class LossReport:
    l_geo: Tensor
    l_occ: Tensor
    l_sem: Tensor
    l_ssc: Tensor

    @property
    def total(self) -> Tensor:
        return ops.add(ops.add(ops.add(self.l_geo, self.l_occ), self.l_sem), self.l_ssc)

    def values(self) -> dict:
        parts = {"l_geo": self.l_geo, "l_occ": self.l_occ, "l_sem": self.l_sem, "l_ssc": self.l_ssc}
        out = {k: float(v.data) for k, v in parts.items()}
        out["total"] = float(sum(out[k] for k in ("l_geo", "l_occ", "l_sem", "l_ssc")))
        return out
