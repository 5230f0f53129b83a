"""Tensor archives, PPM image I/O and run configuration.

Archive layout (all integers little-endian)::

    b"MCLD" | version:u32 | meta_len:u64 | meta (UTF-8 JSON) | count:u32
    count x { name_len:u32 | name (UTF-8) | ndim:u32 | dims:u64*ndim
              | dtype:u8 | payload }

dtype codes: 0 = float32, 1 = float64, 2 = uint8.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"MCLD"
FORMAT_VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("uint8"): 2}


class ArchiveError(Exception):
    """Base class for unreadable archives."""


class BadMagicError(ArchiveError):
    pass


class VersionMismatchError(ArchiveError):
    pass


class TruncatedArchiveError(ArchiveError):
    pass


def _as_array(value) -> np.ndarray:
    if hasattr(value, "detach"):
        value = value.detach().cpu().numpy()
    arr = np.asarray(value)
    if arr.dtype == np.bool_:
        arr = arr.astype(np.uint8)
    if arr.dtype not in _CODES:
        raise TypeError(f"unsupported dtype {arr.dtype}; use float32, float64 or uint8")
    return np.require(arr, requirements="C")  # keeps 0-d shapes, unlike ascontiguousarray


def encode_archive(tensors: Mapping[str, Any], metadata: Mapping[str, Any] | None = None) -> bytes:
    meta = json.dumps(dict(metadata or {}), sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<IQ", FORMAT_VERSION, len(meta)), meta,
             struct.pack("<I", len(tensors))]
    for name, value in tensors.items():
        arr = _as_array(value)
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(struct.pack("<B", _CODES[arr.dtype]))
        parts.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    return b"".join(parts)


def decode_archive(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise TruncatedArchiveError(f"archive truncated at byte {pos} (needed {n} more)")
        out = view[pos:pos + n]
        pos += n
        return out

    if len(view) < 4 or bytes(view[:4]) != MAGIC:
        raise BadMagicError("bad magic: not an MCLD archive")
    pos = 4
    version, meta_len = struct.unpack("<IQ", take(12))
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"version mismatch: file has {version}, reader supports {FORMAT_VERSION}")
    metadata = json.loads(bytes(take(meta_len)).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        (code,) = struct.unpack("<B", take(1))
        if code not in _DTYPES:
            raise ArchiveError(f"unknown dtype code {code} for entry {name!r}")
        dtype = _DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        payload = take(nbytes)
        if name in tensors:
            raise ArchiveError(f"duplicate entry name {name!r}")
        tensors[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
    if pos != len(view):
        raise ArchiveError(f"{len(view) - pos} trailing bytes after last entry")
    return tensors, metadata


def write_archive(path, tensors: Mapping[str, Any], metadata: Mapping[str, Any] | None = None) -> None:
    path = Path(path)
    blob = encode_archive(tensors, metadata)
    try:
        path.write_bytes(blob)
    except OSError as exc:
        raise OSError(f"cannot write archive {path}: {exc}") from exc


def read_archive(path) -> tuple[dict[str, np.ndarray], dict]:
    return decode_archive(Path(path).read_bytes())


# ---------------------------------------------------------------- images


def write_ppm(path, image) -> None:
    """Write an H x W x 3 float image in [0, 1] as binary P6."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected H x W x 3 image, got {arr.shape}")
    u8 = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    header = f"P6\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + u8.tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM (P6)")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PPM supported")
    pos += 1
    raw = np.frombuffer(data[pos:pos + w * h * 3], dtype=np.uint8)
    if raw.size != w * h * 3:
        raise ValueError(f"{path}: truncated pixel data")
    return raw.reshape(h, w, 3).astype(np.float32) / 255.0


# ---------------------------------------------------------------- config


@dataclass(frozen=True)
class RunConfig:
    preset: str = "default"
    canvas: tuple[int, int] = (64, 64)
    parts: int = 10
    tile: int = 32
    f: int = 4
    latent_channels: int = 4
    d: int = 64
    embed_tokens: int = 1
    heads: int = 1
    channels: int = 32
    lambda_s: float = 1.0
    lambda_f: float = 0.5
    T: int = 1000
    beta_start: float = 8.5e-4
    beta_end: float = 1.2e-2
    cfg_scale: float = 3.5
    cond_drop_prob: float = 0.1
    ddim_steps: int = 50
    eta: float = 0.0
    lr: float = 1e-5
    steps: int = 60000
    batch: int = 24
    seed: int = 0
    ablation: str = "full"
    face_size: int = 16
    identity_pool: int = 32
    train_pairs: int = 2000
    ae_steps: int = 3000
    ae_lr: float = 2e-3
    face_steps: int = 1500
    face_lr: float = 2e-3

    @property
    def latent_hw(self) -> tuple[int, int]:
        return self.canvas[0] // self.f, self.canvas[1] // self.f

    def to_dict(self) -> dict:
        out = {fl.name: getattr(self, fl.name) for fl in fields(self)}
        out["canvas"] = list(self.canvas)
        return out


# Toy-scale overrides. `tiny` is the 32x32 training preset (12 patch tokens:
# one per cell of the 3x4 atlas tile grid); `micro` is the 8x8 gradient-check scale.
PRESETS: dict[str, dict[str, Any]] = {
    "default": {},
    "tiny": dict(canvas=(32, 32), f=2, tile=16, embed_tokens=12, lr=1e-3, steps=2000, batch=16,
                 train_pairs=2000, ae_steps=2500, face_steps=1200),
    "micro": dict(canvas=(8, 8), f=2, tile=4, d=8, channels=8, lr=1e-3, steps=10, batch=2,
                  T=100, ddim_steps=5, face_size=8),
}

ABLATIONS = ("B1", "B2", "B3", "B4", "B5", "full")


def _parse_value(key: str, text: str, default):
    text = text.strip()
    if key == "canvas":
        if "x" in text.lower():
            h, w = text.lower().split("x")
            return int(h), int(w)
        return int(text), int(text)
    if isinstance(default, bool):
        return text.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


def parse_config_text(text: str) -> dict[str, Any]:
    defaults = RunConfig()
    known = {fl.name for fl in fields(RunConfig)}
    out: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise KeyError(f"unknown config key {key!r}")
        out[key] = _parse_value(key, value, getattr(defaults, key))
    return out


def _validate(cfg: RunConfig) -> RunConfig:
    if cfg.preset not in PRESETS:
        raise ValueError(f"unknown preset {cfg.preset!r}")
    if cfg.ablation not in ABLATIONS:
        raise ValueError(f"unknown ablation {cfg.ablation!r}; expected one of {ABLATIONS}")
    if cfg.f not in (2, 4):
        raise ValueError("f must be 2 or 4")
    if any(s % cfg.f for s in cfg.canvas):
        raise ValueError(f"canvas {cfg.canvas} not divisible by f={cfg.f}")
    if not 0.0 <= cfg.cond_drop_prob < 1.0:
        raise ValueError("cond_drop_prob must lie in [0, 1)")
    if not 0.0 < cfg.beta_start < cfg.beta_end < 1.0:
        raise ValueError("need 0 < beta_start < beta_end < 1")
    return cfg


def load_config(path=None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Resolve a config: command-line overrides > file > preset > defaults.

    `overrides` values may be strings (parsed like file values) or typed.
    """
    file_values = parse_config_text(Path(path).read_text("utf-8")) if path else {}
    over: dict[str, Any] = {}
    known = {fl.name for fl in fields(RunConfig)}
    defaults = RunConfig()
    for key, value in (overrides or {}).items():
        if key not in known:
            raise KeyError(f"unknown config key {key!r}")
        over[key] = _parse_value(key, value, getattr(defaults, key)) if isinstance(value, str) else value
    preset = over.get("preset", file_values.get("preset", "default"))
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}")
    merged: dict[str, Any] = dict(PRESETS[preset])
    merged.update(file_values)
    merged.update(over)
    merged["preset"] = preset
    if "canvas" in merged:
        merged["canvas"] = tuple(merged["canvas"])
    return _validate(replace(defaults, **merged))


def config_from_dict(values: Mapping[str, Any]) -> RunConfig:
    vals = dict(values)
    if "canvas" in vals:
        vals["canvas"] = tuple(vals["canvas"])
    return _validate(replace(RunConfig(), **vals))


def threads_from_env() -> int:
    try:
        return max(1, int(os.environ.get("MCLD_THREADS", "1")))
    except ValueError:
        return 1
