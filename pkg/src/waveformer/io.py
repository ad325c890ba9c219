"""Binary volume / checkpoint formats and the flat run-config document.

Both binary formats are little-endian with fixed-width headers:

``WVF1`` volume
    magic, u32 ndim (= 4), 4 x u32 extents ``(C, D, H, W)``, u32 dtype code
    (0 = float32), row-major payload.

``WFCK`` checkpoint
    magic, u32 version (= 1), u32 tensor count, then per tensor: u32 name
    length, UTF-8 name, u32 ndim, ndim x u32 extents, float32 payload.
    Tensors appear in parameter-store (lexicographic) order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from .model import ModelConfig, ParamStore

VOLUME_MAGIC = b"WVF1"
CHECKPOINT_MAGIC = b"WFCK"
CHECKPOINT_VERSION = 1
DTYPE_F32 = 0


class FormatError(ValueError):
    """A file is truncated, has the wrong magic, or is otherwise malformed."""


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.path}: truncated at byte {self.pos} (wanted {n} more, "
                              f"file has {len(self.buf)})")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def done(self):
        if self.pos != len(self.buf):
            raise FormatError(f"{self.path}: {len(self.buf) - self.pos} trailing bytes")


def encode_volume(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ValueError(f"volumes are 4D (C,D,H,W), got shape {arr.shape}")
    header = VOLUME_MAGIC + struct.pack("<5I", 4, *arr.shape) + struct.pack("<I", DTYPE_F32)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode_volume(buf: bytes, path="<bytes>") -> np.ndarray:
    r = _Reader(buf, path)
    magic = r.take(4)
    if magic != VOLUME_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {VOLUME_MAGIC!r}")
    ndim = r.u32()
    if ndim != 4:
        raise FormatError(f"{path}: ndim {ndim}, expected 4")
    shape = tuple(r.u32() for _ in range(4))
    if min(shape) < 1:
        raise FormatError(f"{path}: zero extent in {shape}")
    code = r.u32()
    if code != DTYPE_F32:
        raise FormatError(f"{path}: unsupported dtype code {code}")
    payload = r.take(int(np.prod(shape)) * 4)
    r.done()
    return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)


def write_volume(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode_volume(arr))


def read_volume(path) -> np.ndarray:
    return decode_volume(Path(path).read_bytes(), path)


def read_labels(path) -> np.ndarray:
    vol = read_volume(path)
    if vol.shape[0] != 1:
        raise FormatError(f"{path}: label volumes have one channel, got {vol.shape[0]}")
    lab = vol[0]
    if np.any(lab < 0) or np.any(lab != np.round(lab)):
        raise FormatError(f"{path}: label volume holds non-integer or negative values")
    return lab.astype(np.int64)


def encode_checkpoint(store: ParamStore) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(store))]
    for name, arr in store.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes, path="<bytes>") -> ParamStore:
    r = _Reader(buf, path)
    magic = r.take(4)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    tensors = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        if name in tensors:
            raise FormatError(f"{path}: duplicate tensor name {name!r}")
        ndim = r.u32()
        shape = tuple(r.u32() for _ in range(ndim))
        payload = r.take(int(np.prod(shape)) * 4)
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
    r.done()
    return ParamStore(tensors)


def save_checkpoint(path, store: ParamStore) -> None:
    Path(path).write_bytes(encode_checkpoint(store))


def load_checkpoint(path) -> ParamStore:
    return decode_checkpoint(Path(path).read_bytes(), path)


# -- run config --------------------------------------------------------------

_MODEL_KEYS = {f.name for f in fields(ModelConfig)}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    seed: int = 0
    iterations: int = 500
    lr: float = 1e-4
    weight_decay: float = 1e-5
    batch_size: int = 2
    n_train: int = 64
    n_val: int = 16
    noise: float = 0.3
    data_dir: str | None = None
    checkpoint: str | None = None
    loss_trace: str | None = None
    out_dir: str | None = None
    metrics: tuple = ("dice", "hd95")
    bins: tuple | None = None
    spacing: tuple = (1.0, 1.0, 1.0)

    def validate(self) -> "RunConfig":
        self.model.validate()
        if self.iterations < 0 or self.batch_size < 1:
            raise ValueError("iterations must be >= 0 and batch_size >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        unknown = set(self.metrics) - {"dice", "hd95"}
        if unknown:
            raise ValueError(f"unknown metrics {sorted(unknown)}")
        if self.bins is not None and any(b <= a for a, b in zip(self.bins, self.bins[1:])):
            raise ValueError(f"bins must be strictly increasing, got {list(self.bins)}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError("spacing needs three positive values")
        return self


_RUN_KEYS = {f.name for f in fields(RunConfig)} - {"model"}
_TUPLE_KEYS = {"metrics", "bins", "spacing"}


def parse_run_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse a flat YAML mapping; unknown keys are rejected."""
    doc = yaml.safe_load(text) or {}
    if not isinstance(doc, dict):
        raise ValueError(f"{source}: config must be a flat mapping")
    unknown = set(doc) - _MODEL_KEYS - _RUN_KEYS
    if unknown:
        raise ValueError(f"{source}: unknown config keys {sorted(unknown)}")
    model_kw = {k: v for k, v in doc.items() if k in _MODEL_KEYS}
    run_kw = {k: (tuple(v) if k in _TUPLE_KEYS and v is not None else v)
              for k, v in doc.items() if k in _RUN_KEYS}
    try:
        model = ModelConfig(**model_kw)
    except (TypeError, ValueError) as exc:
        raise ValueError(f"{source}: {exc}") from None
    return RunConfig(model=model, **run_kw)


def load_run_config(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file {p} does not exist")
    return parse_run_config(p.read_text(), str(p))
