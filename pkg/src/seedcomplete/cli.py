"""Command-line entry point.

Exit codes: 0 success, 1 validation failure, 2 format or input errors.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .config import ConfigError, ModelConfig, parse_pairs
from .dataset import generate_dataset, load_dataset, make_sample, read_sample
from .metrics import DEFAULT_RANGES, format_records, format_report
from .voxels import FormatError, SceneSpec, write_vgrid

EXIT_OK, EXIT_INVALID, EXIT_FORMAT = 0, 1, 2

log = logging.getLogger("seedcomplete")


def _ranges(text: str):
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad range list {text!r}") from exc


def cmd_synth(args) -> int:
    spec = SceneSpec.parse(args.spec)
    ids = generate_dataset(args.out, args.seed, args.count, spec, n_frames=args.frames, width=args.width,
                           height=args.height, difficulty=args.difficulty, invalid_prob=args.invalid_prob)
    print(f"wrote {len(ids)} scenes to {args.out}")
    return EXIT_OK


def _load_config(args) -> ModelConfig:
    base = ModelConfig.load(args.config) if args.config else ModelConfig()
    if args.set:
        base = ModelConfig.from_pairs(parse_pairs(args.set, "--set"), base)
    return base


def cmd_train(args) -> int:
    from .train import Trainer

    config = _load_config(args)
    if args.data:
        samples = load_dataset(args.data)
    else:
        spec = config.output_spec
        samples = [make_sample(config.data_seed + i, spec, n_frames=config.n_frames, width=config.image_width,
                               height=config.image_height, scene_id=f"{i:04d}") for i in range(config.scenes)]
    resume = ckpt_io.load(args.resume) if args.resume else None
    log_path = Path(args.log) if args.log else Path(str(args.out) + ".jsonl")
    if resume is None and log_path.exists():
        log_path.unlink()
    trainer = Trainer(config, samples, log_path, resume)
    trainer.run()
    ckpt_io.save(args.out, trainer.checkpoint())
    last = trainer.records[-1] if trainer.records else {}
    print(f"trained to step {trainer.step}; checkpoint {args.out}; log {log_path}")
    if "losses" in last:
        print(" ".join(f"{k}={v:.6f}" for k, v in last["losses"].items()))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .train import evaluate, model_from_checkpoint

    config, model = model_from_checkpoint(ckpt_io.load(args.ckpt))
    samples = load_dataset(args.data)
    res = evaluate(samples, model, config, args.ranges)
    fmt = format_records if args.format == "kv" else format_report
    sys.stdout.write(fmt(res["full"], ranged=res["ranges"]))
    return EXIT_OK


def cmd_infer(args) -> int:
    from .train import model_from_checkpoint, predict_labels

    config, model = model_from_checkpoint(ckpt_io.load(args.ckpt))
    sample = read_sample(args.sample)
    labels = predict_labels(model, sample, config)
    write_vgrid(args.out_vgrid, labels.astype(np.uint8), config.output_spec)
    print(f"wrote {args.out_vgrid} {labels.shape}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import format_results, run_all

    results = run_all(args.tol)
    sys.stdout.write(format_results(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_INVALID


def cmd_bench(args) -> int:
    from .train import bench, model_from_checkpoint

    config, model = model_from_checkpoint(ckpt_io.load(args.ckpt))
    if args.sample:
        sample = read_sample(args.sample)
    else:
        sample = make_sample(config.data_seed, config.output_spec, n_frames=config.n_frames,
                             width=config.image_width, height=config.image_height)
    print(json.dumps(bench(model, sample, config, args.repeats), sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="seedcomplete", description="Seed-guided semantic scene completion.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--count", type=int, default=4)
    s.add_argument("--spec", default="desk", help="full, desk or X,Y,Z:size[:ox,oy,oz]")
    s.add_argument("--out", required=True)
    s.add_argument("--frames", type=int, default=1)
    s.add_argument("--width", type=int, default=128)
    s.add_argument("--height", type=int, default=64)
    s.add_argument("--difficulty", type=int, default=2)
    s.add_argument("--invalid-prob", type=float, default=1.0)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model and write a checkpoint")
    t.add_argument("--config")
    t.add_argument("--data", help="dataset directory (default: synthesize config.scenes scenes)")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--log", help="JSON-lines training log (default: <out>.jsonl)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="metric report on a dataset")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--ranges", type=_ranges, default=DEFAULT_RANGES)
    e.add_argument("--format", choices=("text", "kv"), default="text")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="predict one scene and write a label VGRID")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--sample", required=True, help="scene directory")
    i.add_argument("--out-vgrid", required=True)
    i.set_defaults(func=cmd_infer)

    g = sub.add_parser("gradcheck", help="finite-difference check of every op and block")
    g.add_argument("--tol", type=float, default=1e-4)
    g.set_defaults(func=cmd_gradcheck)

    b = sub.add_parser("bench", help="time the inference path (informational)")
    b.add_argument("--ckpt", required=True)
    b.add_argument("--sample")
    b.add_argument("--repeats", type=int, default=3)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (FormatError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
