"""Versioned binary checkpoint container.

Byte layout (all integers little-endian)::

    0   8 bytes   magic  b"LKNTCKPT"
    8   uint32    format version (currently 1)
    12  uint32    manifest length L in bytes
    16  L bytes   manifest, UTF-8 JSON
    16+L          tensor payload: each tensor as raw float64 (<f8), C order,
                  concatenated in manifest order

The manifest holds ``stage``, ``config`` (StageConfig as a dict),
``config_hash``, ``components`` (component configs for hybrid stages),
``tensors`` (list of ``{name, shape, offset}`` with offset in bytes from
the payload start) and free-form ``meta`` (epoch, validation accuracy, ...).
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import ConfigError, DataError
from .models import HybridModel, StageConfig, StageModel
from .nn import Module
from .tensor import Rng

MAGIC = b"LKNTCKPT"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    config: StageConfig
    state: "OrderedDict[str, np.ndarray]"
    components: list[StageConfig] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def stage(self) -> str:
        return self.config.stage

    @classmethod
    def from_model(cls, model: Module, meta: dict | None = None) -> "Checkpoint":
        components = []
        if isinstance(model, HybridModel):
            components = [model.first.config, model.second.config]
        return cls(model.config, model.state_dict(), components, dict(meta or {}))

    def build_model(self) -> Module:
        if self.config.is_hybrid:
            if len(self.components) != 2:
                raise ConfigError(f"{self.stage} checkpoint lacks its two component configs")
            first = StageModel(self.components[0], Rng(0))
            second = StageModel(self.components[1], Rng(0))
            model = HybridModel(self.config, first, second, Rng(0))
        else:
            model = StageModel(self.config, Rng(0))
        model.load_state_dict(self.state)
        return model.eval()

    def to_bytes(self) -> bytes:
        tensors, payload, offset = [], [], 0
        for name, value in self.state.items():
            arr = np.ascontiguousarray(value, dtype="<f8")
            tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
            payload.append(arr.tobytes())
            offset += arr.nbytes
        manifest = {
            "format": FORMAT_VERSION,
            "stage": self.stage,
            "config": self.config.to_dict(),
            "config_hash": self.config.config_hash(),
            "components": [c.to_dict() for c in self.components],
            "tensors": tensors,
            "meta": self.meta,
        }
        blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
        return MAGIC + struct.pack("<II", FORMAT_VERSION, len(blob)) + blob + b"".join(payload)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        if raw[:8] != MAGIC:
            raise DataError("not a checkpoint file (bad magic)")
        version, length = struct.unpack("<II", raw[8:16])
        if version != FORMAT_VERSION:
            raise DataError(f"unsupported checkpoint format version {version}")
        manifest = json.loads(raw[16 : 16 + length].decode("utf-8"))
        config = StageConfig.from_dict(manifest["config"])
        if config.config_hash() != manifest["config_hash"]:
            raise ConfigError("checkpoint config does not match its recorded hash")
        payload = memoryview(raw)[16 + length :]
        state = OrderedDict()
        for entry in manifest["tensors"]:
            count = int(np.prod(entry["shape"], dtype=np.int64))
            start = entry["offset"]
            arr = np.frombuffer(payload[start : start + 8 * count], dtype="<f8").astype(np.float64)
            state[entry["name"]] = arr.reshape(entry["shape"])
        components = [StageConfig.from_dict(c) for c in manifest.get("components", [])]
        return cls(config, state, components, manifest.get("meta", {}))

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())
        return path


def save_checkpoint(model: Module, path, meta: dict | None = None) -> Path:
    return Checkpoint.from_model(model, meta).save(path)


def load_checkpoint(path, expected: StageConfig | None = None) -> Checkpoint:
    """Read a checkpoint; refuse it when ``expected`` has a different config hash."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    ckpt = Checkpoint.from_bytes(raw)
    if expected is not None and expected.config_hash() != ckpt.config.config_hash():
        raise ConfigError(
            f"checkpoint {path} was written for config {ckpt.config.config_hash()} "
            f"({ckpt.stage}), expected {expected.config_hash()} ({expected.stage})"
        )
    return ckpt
