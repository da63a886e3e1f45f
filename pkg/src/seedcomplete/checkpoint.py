"""Versioned binary checkpoints.

Layout: ``b"SSCK"``, uint32 version, uint32 header length, a UTF-8 JSON header
(sorted keys, no timestamps) describing every array, then the raw little-endian
array bytes in header order. Identical content always gives identical bytes.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .voxels import FormatError

MAGIC = b"SSCK"
VERSION = 1
_PREFIX = struct.Struct("<4sII")


@dataclass
class Checkpoint:
    config_text: str
    params: dict  # name -> array
    step: int = 0
    opt_t: int = 0
    opt_m: dict = field(default_factory=dict)
    opt_v: dict = field(default_factory=dict)
    rng: dict = field(default_factory=dict)  # {"seed": int, "step": int}
    extra: dict = field(default_factory=dict)


def _arrays(ck: Checkpoint):
    for prefix, group in (("param", ck.params), ("adam_m", ck.opt_m), ("adam_v", ck.opt_v)):
        for name, arr in group.items():
            yield f"{prefix}/{name}", np.ascontiguousarray(arr)


def to_bytes(ck: Checkpoint) -> bytes:
    table = []
    blobs = []
    offset = 0
    for key, arr in _arrays(ck):
        data = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        table.append({"key": key, "dtype": arr.dtype.str.lstrip("<>="), "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = {
        "config": ck.config_text,
        "step": int(ck.step),
        "opt_t": int(ck.opt_t),
        "rng": ck.rng,
        "extra": ck.extra,
        "arrays": table,
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return _PREFIX.pack(MAGIC, VERSION, len(hb)) + hb + b"".join(blobs)


def from_bytes(raw: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(raw) < _PREFIX.size:
        raise FormatError(f"{source}: truncated checkpoint header at offset {len(raw)}")
    magic, version, hlen = _PREFIX.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"{source}: bad checkpoint magic {magic!r} at offset 0")
    if version != VERSION:
        raise FormatError(f"{source}: unsupported checkpoint version {version} at offset 4 (expected {VERSION})")
    start = _PREFIX.size + hlen
    if len(raw) < start:
        raise FormatError(f"{source}: truncated checkpoint header at offset {len(raw)} (need {start})")
    try:
        header = json.loads(raw[_PREFIX.size:start].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{source}: unreadable checkpoint header at offset {_PREFIX.size}: {exc}") from exc
    missing = {"config", "step", "opt_t", "rng", "arrays"} - set(header)
    if missing:
        raise FormatError(f"{source}: checkpoint header at offset {_PREFIX.size} lacks {sorted(missing)}")
    groups = {"param": {}, "adam_m": {}, "adam_v": {}}
    end = start
    for entry in header["arrays"]:
        lo = start + entry["offset"]
        hi = lo + entry["nbytes"]
        if hi > len(raw):
            raise FormatError(f"{source}: truncated array {entry['key']} at offset {len(raw)} (need {hi})")
        dt = np.dtype("<" + entry["dtype"]) if entry["dtype"][0] in "fiu" else np.dtype(entry["dtype"])
        arr = np.frombuffer(raw, dtype=dt, count=int(np.prod(entry["shape"], dtype=np.int64)), offset=lo)
        prefix, name = entry["key"].split("/", 1)
        groups[prefix][name] = arr.reshape(entry["shape"]).astype(dt.newbyteorder("="))
        end = max(end, hi)
    if end != len(raw):
        raise FormatError(f"{source}: {len(raw) - end} trailing bytes after offset {end}")
    return Checkpoint(header["config"], groups["param"], header["step"], header["opt_t"],
                      groups["adam_m"], groups["adam_v"], header["rng"], header.get("extra", {}))


def save(path, ck: Checkpoint) -> None:
    Path(path).write_bytes(to_bytes(ck))


def load(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    return from_bytes(path.read_bytes(), str(path))
