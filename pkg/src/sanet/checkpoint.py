"""Binary checkpoint files.

Layout (little-endian): magic ``SANET\\x01``, u32 format version, u32-length
UTF-8 metadata block of ``key=value`` lines, u32 parameter count, then per
parameter a u32-length UTF-8 name, u32 rank, u32 extents and f64 values.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cells import Model, ModelConfig
from .data import NormalizationStats
from .tensor import Tensor

MAGIC = b"SANET\x01"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: dict[str, np.ndarray]
    stats: NormalizationStats
    best_val_loss: float
    epoch: int
    frozen: tuple[str, ...] = ()
    extra: dict[str, str] = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: Model, stats: NormalizationStats, best_val_loss: float, epoch: int,
                   extra: dict[str, str] | None = None) -> "Checkpoint":
        return cls(model.config, {k: np.array(v.data) for k, v in model.params.items()}, stats,
                   float(best_val_loss), int(epoch), tuple(sorted(model.frozen)), dict(extra or {}))

    def model(self, features: np.ndarray | None = None) -> Model:
        params = {k: Tensor(v, requires_grad=k not in self.frozen, name=k) for k, v in self.params.items()}
        return Model(self.model_config, params, features, frozenset(self.frozen))

    def metadata(self) -> dict[str, str]:
        cfg = self.model_config
        meta = {
            "kind": cfg.kind,
            "grid_rows": str(cfg.grid[0]),
            "grid_cols": str(cfg.grid[1]),
            "channels": str(cfg.channels),
            "layers": str(cfg.layers),
            "kernel_size": str(cfg.kernel_size),
            "temporal_hidden": str(cfg.temporal_hidden),
            "look_back": str(cfg.look_back),
            "n_features": str(cfg.n_features),
            "norm_mean": repr(self.stats.mean),
            "norm_std": repr(self.stats.std),
            "best_val_loss": repr(self.best_val_loss),
            "epoch": str(self.epoch),
            "frozen": ",".join(self.frozen),
        }
        for k, v in self.extra.items():
            meta[f"config.{k}"] = v
        return meta

    def save(self, path) -> None:
        out = bytearray(MAGIC)
        out += struct.pack("<I", FORMAT_VERSION)
        for k, v in self.metadata().items():
            if "\n" in k + v or "=" in k:
                raise CheckpointError(f"metadata entry {k!r} cannot be encoded")
        meta = "".join(f"{k}={v}\n" for k, v in self.metadata().items()).encode("utf-8")
        out += struct.pack("<I", len(meta)) + meta
        out += struct.pack("<I", len(self.params))
        for name, value in self.params.items():
            encoded = name.encode("utf-8")
            out += struct.pack("<I", len(encoded)) + encoded
            out += struct.pack("<I", value.ndim)
            out += struct.pack(f"<{value.ndim}I", *value.shape)
            out += np.ascontiguousarray(value, dtype="<f8").tobytes()
        Path(path).write_bytes(bytes(out))

    @classmethod
    def load(cls, path) -> "Checkpoint":
        blob = Path(path).read_bytes()
        reader = _Reader(blob, path)
        if reader.take(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        version = reader.u32()
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        meta = {}
        for line in reader.string().splitlines():
            key, sep, value = line.partition("=")
            if not sep:
                raise CheckpointError(f"{path}: bad metadata line {line!r}")
            meta[key] = value
        params = {}
        for _ in range(reader.u32()):
            name = reader.string()
            rank = reader.u32()
            shape = tuple(reader.u32() for _ in range(rank))
            count = int(np.prod(shape)) if shape else 1
            values = np.frombuffer(reader.take(8 * count), dtype="<f8").astype(np.float64)
            params[name] = values.reshape(shape)
        if reader.pos != len(blob):
            raise CheckpointError(f"{path}: trailing bytes")
        try:
            config = ModelConfig(
                kind=meta["kind"],
                grid=(int(meta["grid_rows"]), int(meta["grid_cols"])),
                channels=int(meta["channels"]),
                layers=int(meta["layers"]),
                kernel_size=int(meta["kernel_size"]),
                temporal_hidden=int(meta["temporal_hidden"]),
                look_back=int(meta["look_back"]),
                n_features=int(meta["n_features"]),
            )
            stats = NormalizationStats(float(meta["norm_mean"]), float(meta["norm_std"]))
            best, epoch = float(meta["best_val_loss"]), int(meta["epoch"])
        except KeyError as exc:
            raise CheckpointError(f"{path}: metadata is missing {exc}") from None
        frozen = tuple(f for f in meta.get("frozen", "").split(",") if f)
        extra = {k[len("config."):]: v for k, v in meta.items() if k.startswith("config.")}
        return cls(config, params, stats, best, epoch, frozen, extra)


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob, self.pos, self.path = blob, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")
