"""Model and training configuration: a flat key=value file plus overrides."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .voxels import SceneSpec


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    spec: str = "desk"  # output grid; the network works at half resolution
    channels: int = 16
    occ_channels: int = 8
    n_classes: int = 6
    threshold: float = 0.5
    mssd_depth: int = 1
    aspp_branch: int = 8
    n_frames: int = 1
    encoder_widths: tuple = (16, 32)
    refiner_widths: tuple = (16, 32, 64)
    image_width: int = 128
    image_height: int = 64
    depth_noise: float = 0.5  # metres, std of additive noise on input depth
    semantic_guidance: bool = True
    lr: float = 2e-4
    weight_decay: float = 1e-2
    epochs: int = 40
    steps: int = 0  # optimizer steps; 0 means ``epochs`` passes over the data
    accum_steps: int = 1
    seed: int = 0
    dtype: str = "float32"
    log_every: int = 1
    scenes: int = 4  # synthetic scenes generated when no dataset is given
    data_seed: int = 0

    def __post_init__(self):
        self.validate()

    @property
    def output_spec(self) -> SceneSpec:
        return SceneSpec.parse(self.spec)

    @property
    def working_spec(self) -> SceneSpec:
        return self.output_spec.coarsen(2)

    def validate(self) -> None:
        for name in ("channels", "occ_channels", "n_classes", "mssd_depth", "aspp_branch", "n_frames",
                     "image_width", "image_height", "epochs", "accum_steps", "log_every", "scenes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if not 0 < self.threshold < 1:
            raise ConfigError(f"threshold must lie in (0, 1), got {self.threshold}")
        if self.lr < 0 or self.weight_decay < 0 or self.depth_noise < 0:
            raise ConfigError("lr, weight_decay and depth_noise must be non-negative")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if len(self.refiner_widths) != 3:
            raise ConfigError("refiner_widths needs exactly three entries")
        if not self.encoder_widths or any(w < 1 for w in self.encoder_widths):
            raise ConfigError("encoder_widths must be a non-empty list of positive ints")
        try:
            spec = self.output_spec
            work = spec.coarsen(2)
        except ValueError as exc:
            raise ConfigError(f"bad spec {self.spec!r}: {exc}") from exc
        if any(d % 4 for d in work.dims):
            raise ConfigError(f"working dims {work.dims} must be divisible by 4")
        step = 2 ** len(self.encoder_widths)
        if self.image_width % step or self.image_height % step:
            raise ConfigError(f"image size must be divisible by {step}")

    # -- text form -----------------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            if f.name.startswith("_"):
                continue
            lines.append(f"{f.name}={_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_pairs(cls, pairs: dict, base: "ModelConfig | None" = None) -> "ModelConfig":
        base = base or cls()
        known = {f.name: f for f in fields(cls) if not f.name.startswith("_")}
        changes = {}
        for key, text in pairs.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            changes[key] = _parse(text, getattr(base, key), key)
        return dataclasses.replace(base, **changes)

    @classmethod
    def from_text(cls, text: str, source: str = "<text>") -> "ModelConfig":
        return cls.from_pairs(parse_pairs(text.splitlines(), source))

    @classmethod
    def load(cls, path, overrides=()) -> "ModelConfig":
        cfg = cls.from_text(Path(path).read_text(), str(path))
        return cls.from_pairs(parse_pairs(overrides, "override"), cfg) if overrides else cfg


def parse_pairs(lines, source: str) -> dict:
    out = {}
    for i, line in enumerate(lines):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}: line {i + 1}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(text: str, like, key: str):
    try:
        if isinstance(like, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no", "on", "off"):
                raise ValueError(text)
            return low in ("true", "1", "yes", "on")
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
        if isinstance(like, tuple):
            return tuple(int(v) for v in text.split(",") if v.strip())
        return text
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {text!r}") from exc
