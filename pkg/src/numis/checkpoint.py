"""Binary checkpoint container.

Layout (little-endian)::

    b"NUMISCKP"                 magic
    u32 version
    u32 n, n bytes              JSON metadata (sorted keys, UTF-8)
    u32 count                   number of arrays
    per array:
        u32 n, n bytes          name (UTF-8)
        u32 ndim, ndim x u32    shape
        prod(shape) x f32       values, row-major
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"NUMISCKP"
VERSION = 1


class CheckpointError(Exception):
    """Checkpoint file is truncated, corrupt or from another format version."""


@dataclass
class ModelCheckpoint:
    epoch: int
    params: dict[str, np.ndarray]
    stats: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        meta = {"epoch": self.epoch, "stats": self.stats, "model": self.model}
        meta_b = json.dumps(meta, sort_keys=True, separators=(",", ":"), allow_nan=True).encode()
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<II", VERSION, len(meta_b)))
        buf.write(meta_b)
        buf.write(struct.pack("<I", len(self.params)))
        for name, arr in self.params.items():
            a = np.ascontiguousarray(arr, dtype="<f4")
            nb = name.encode()
            buf.write(struct.pack("<I", len(nb)))
            buf.write(nb)
            buf.write(struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape))
            buf.write(a.tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "ModelCheckpoint":
        view = memoryview(raw)
        pos = 0

        def read(n: int) -> memoryview:
            nonlocal pos
            if pos + n > len(view):
                raise CheckpointError(f"truncated checkpoint: needed {n} bytes at offset {pos}, file has {len(view)}")
            out = view[pos : pos + n]
            pos += n
            return out

        def u32() -> int:
            return struct.unpack("<I", read(4))[0]

        if bytes(read(len(MAGIC))) != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        version = u32()
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
        try:
            meta = json.loads(bytes(read(u32())).decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"corrupt metadata block: {exc}") from exc
        params: dict[str, np.ndarray] = {}
        for _ in range(u32()):
            name = bytes(read(u32())).decode()
            ndim = u32()
            shape = struct.unpack(f"<{ndim}I", read(4 * ndim))
            count = int(np.prod(shape, dtype=np.int64))
            params[name] = np.frombuffer(read(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
        if pos != len(view):
            raise CheckpointError(f"{len(view) - pos} trailing bytes after last array")
        return cls(epoch=meta["epoch"], params=params, stats=meta["stats"], model=meta["model"])


def save_checkpoint(ckpt: ModelCheckpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(ckpt.to_bytes())
    return path


def load_checkpoint(path) -> ModelCheckpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return ModelCheckpoint.from_bytes(raw)


def build_model(ckpt: ModelCheckpoint):
    """Reconstruct the model a checkpoint was taken from and load its parameters."""
    from .cnn import CnnConfig, CnnModel
    from .vit import ViTConfig, ViTModel

    kind = ckpt.model.get("kind")
    cfg = dict(ckpt.model.get("config", {}))
    if kind == "vit":
        model = ViTModel(ViTConfig(**cfg))
    elif kind == "cnn":
        cfg["conv_blocks"] = tuple(tuple(b) for b in cfg["conv_blocks"])
        cfg["fc_widths"] = tuple(cfg["fc_widths"])
        model = CnnModel(CnnConfig(**cfg))
    else:
        raise CheckpointError(f"unknown model kind {kind!r}")
    model.load_state_dict(ckpt.params)
    return model
