"""Training loop, evaluation and timing."""
from __future__ import annotations

import json
import logging
import math
import time
from pathlib import Path

import numpy as np

from .autodiff import AdamW, default_dtype, no_grad
from .checkpoint import Checkpoint
from .config import ConfigError, ModelConfig
from .metrics import DEFAULT_RANGES, iou_miou, range_crop
from .model import SSCNet, compute_losses, prepare
from .synth import SplitMix64

log = logging.getLogger(__name__)

OCC_BINS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)


def occupancy_summary(probs: np.ndarray, threshold: float) -> dict:
    """Counts of voxels above each bin edge and above the seed threshold."""
    flat = np.asarray(probs).reshape(-1)
    out = {f"{t:g}": int((flat > t).sum()) for t in OCC_BINS}
    out["threshold"] = int((flat > threshold).sum())
    return out


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    """Deterministic sample order for one epoch."""
    keys = SplitMix64.stream(seed, f"order/{epoch}").next_u64(n)
    return np.argsort(keys, kind="stable")


def build_model(config: ModelConfig) -> SSCNet:
    with default_dtype(config.dtype):
        return SSCNet(config)


class Trainer:
    """Single-sample steps with optional gradient accumulation.

    The only training randomness is the per-epoch sample order, derived from
    ``(config.seed, epoch)``, so ``(seed, step)`` is the complete RNG state.
    """

    def __init__(self, config: ModelConfig, samples, log_path=None, resume: Checkpoint | None = None):
        if not samples:
            raise ConfigError("training needs at least one sample")
        self.config = config
        self.preps = [prepare(s, config) for s in samples]
        self.model = build_model(config)
        params = self.model.parameters()
        # lr = 0 is allowed as a frozen run; the optimizer itself rejects it
        self.optimizer = AdamW(params, config.lr, config.weight_decay) if config.lr > 0 else None
        self.step = 0
        self.log_path = Path(log_path) if log_path else None
        self.records = []
        if resume is not None:
            self._restore(resume)

    # -- state ---------------------------------------------------------------

    def _restore(self, ck: Checkpoint) -> None:
        own = ModelConfig.from_text(ck.config_text)
        if own != self.config:
            raise ConfigError("checkpoint config differs from the training config")
        self.model.load_state_dict(ck.params)
        self.step = int(ck.step)
        if self.optimizer is not None and ck.opt_m:
            names = [n for n, _ in self.model.named_parameters()]
            self.optimizer.load_state({"t": ck.opt_t, "m": [ck.opt_m[n] for n in names],
                                       "v": [ck.opt_v[n] for n in names]})

    def checkpoint(self) -> Checkpoint:
        names = [n for n, _ in self.model.named_parameters()]
        m, v, t = {}, {}, 0
        if self.optimizer is not None:
            st = self.optimizer.state()
            m, v, t = dict(zip(names, st["m"])), dict(zip(names, st["v"])), st["t"]
        return Checkpoint(self.config.to_text(), self.model.state_dict(), self.step, t, m, v,
                          {"seed": self.config.seed, "step": self.step})

    # -- loop ----------------------------------------------------------------

    def total_steps(self) -> int:
        cfg = self.config
        if cfg.steps:
            return cfg.steps
        return cfg.epochs * math.ceil(len(self.preps) / cfg.accum_steps)

    def sample_index(self, k: int) -> int:
        n = len(self.preps)
        return int(epoch_order(self.config.seed, k // n, n)[k % n])

    def train_step(self) -> dict:
        cfg = self.config
        self.model.zero_grad()
        totals = {}
        seeds, summary, scenes = 0, None, []
        with default_dtype(cfg.dtype):
            for a in range(cfg.accum_steps):
                prep = self.preps[self.sample_index(self.step * cfg.accum_steps + a)]
                pred = self.model(prep, "train")
                report = compute_losses(pred, prep, cfg)
                total = report.total
                if cfg.accum_steps > 1:
                    total = total * (1.0 / cfg.accum_steps)
                total.backward()
                for k, v in report.values().items():
                    totals[k] = totals.get(k, 0.0) + v / cfg.accum_steps
                seeds = pred.n_seeds
                summary = occupancy_summary(pred.occupancy.probs.data, cfg.threshold)
                scenes.append(prep.scene_id)
        if self.optimizer is not None:
            self.optimizer.step()
        self.step += 1
        rec = {"step": self.step, "scenes": scenes, "losses": totals, "n_seeds": seeds,
               "occupancy_above": summary}
        self._emit(rec)
        return rec

    def run(self, steps: int | None = None, until: int | None = None) -> list:
        """Run ``steps`` more optimizer steps (default: up to ``total_steps``)."""
        end = until if until is not None else (self.step + steps if steps is not None else self.total_steps())
        per_epoch = math.ceil(len(self.preps) / self.config.accum_steps)
        out = []
        epoch_losses = []
        while self.step < end:
            rec = self.train_step()
            out.append(rec)
            epoch_losses.append(rec["losses"])
            if self.step % per_epoch == 0:
                mean = {k: float(np.mean([r[k] for r in epoch_losses])) for k in epoch_losses[0]}
                self._emit({"epoch": self.step // per_epoch, "step": self.step, "mean_losses": mean})
                epoch_losses = []
        return out

    def _emit(self, rec: dict) -> None:
        self.records.append(rec)
        if self.step % self.config.log_every == 0 or "epoch" in rec:
            log.info("step %d %s", self.step, json.dumps(rec.get("losses", rec.get("mean_losses"))))
        if self.log_path is not None:
            with open(self.log_path, "a") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def train(samples, config: ModelConfig, log_path=None, resume: Checkpoint | None = None) -> Trainer:
    trainer = Trainer(config, samples, log_path, resume)
    trainer.run()
    return trainer


def model_from_checkpoint(ck: Checkpoint):
    config = ModelConfig.from_text(ck.config_text)
    model = build_model(config)
    model.load_state_dict(ck.params)
    return config, model


def predict_labels(model: SSCNet, sample, config: ModelConfig) -> np.ndarray:
    with default_dtype(config.dtype):
        return model.predict(prepare(sample, config)).labels


def evaluate(samples, model: SSCNet, config: ModelConfig, ranges=DEFAULT_RANGES) -> dict:
    """Dataset-level metrics: counts are pooled over all samples before dividing."""
    preds, gts = [], []
    for s in samples:
        preds.append(predict_labels(model, s, config))
        gts.append(np.asarray(s.labels))
    spec = config.output_spec
    full = iou_miou(_stack(preds), _stack(gts), config.n_classes)
    ranged = {}
    for r in ranges:
        ranged[float(r)] = iou_miou(_stack([range_crop(p, spec, r) for p in preds]),
                                    _stack([range_crop(g, spec, r) for g in gts]), config.n_classes)
    return {"full": full, "ranges": ranged}


def _stack(grids) -> np.ndarray:
    return np.concatenate([np.asarray(g).reshape(-1) for g in grids])


def bench(model: SSCNet, sample, config: ModelConfig, repeats: int = 3) -> dict:
    """Wall-clock inference timing (informational)."""
    with default_dtype(config.dtype):
        prep = prepare(sample, config)
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            with no_grad():
                model.predict(prep)
            times.append(time.perf_counter() - t0)
    return {"repeats": repeats, "mean_s": float(np.mean(times)), "min_s": float(np.min(times))}
