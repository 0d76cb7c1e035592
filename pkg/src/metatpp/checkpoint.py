"""Versioned binary container for trained models.

Layout (all integers little-endian)::

    8 bytes   magic b"METATPP\\0"
    u32       format version
    u64       header length in bytes
    header    UTF-8 JSON: model kind, model config, fingerprint, scale, val_nll,
              epoch, extra metadata, tensor table [{name, shape}]
    data      float64 little-endian tensors, concatenated in table order

Floats in the header are written with ``float.hex`` so they round-trip exactly.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"METATPP\0"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def fingerprint(model_kind, model_config):
    blob = json.dumps({"kind": model_kind, "config": model_config}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class Checkpoint:
    model_kind: str
    model_config: dict
    tensors: dict
    scale: float = 1.0
    val_nll: float = float("nan")
    epoch: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def fingerprint(self):
        return fingerprint(self.model_kind, self.model_config)

    def to_bytes(self):
        names = list(self.tensors)
        arrays = [np.ascontiguousarray(self.tensors[n], dtype="<f8") for n in names]
        header = {
            "model_kind": self.model_kind,
            "model_config": self.model_config,
            "fingerprint": self.fingerprint,
            "scale": float(self.scale).hex(),
            "val_nll": float(self.val_nll).hex(),
            "epoch": int(self.epoch),
            "extra": self.extra,
            "tensors": [{"name": n, "shape": list(a.shape)} for n, a in zip(names, arrays)],
        }
        hb = json.dumps(header, sort_keys=True).encode()
        parts = [MAGIC, struct.pack("<IQ", FORMAT_VERSION, len(hb)), hb]
        parts += [a.tobytes() for a in arrays]
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, raw: bytes):
        if raw[:8] != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        if len(raw) < 20:
            raise CheckpointError("truncated checkpoint header")
        version, hlen = struct.unpack_from("<IQ", raw, 8)
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint format version {version}")
        start = 8 + 12
        header = json.loads(raw[start:start + hlen].decode())
        offset = start + hlen
        tensors = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape, dtype=np.int64))
            if offset + 8 * count > len(raw):
                raise CheckpointError("missing tensor data")
            data = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
            tensors[entry["name"]] = data.reshape(shape).astype(np.float64)
            offset += 8 * count
        if offset != len(raw):
            raise CheckpointError("trailing or missing tensor data")
        ck = cls(header["model_kind"], header["model_config"], tensors,
                 float.fromhex(header["scale"]), float.fromhex(header["val_nll"]),
                 header["epoch"], header["extra"])
        if ck.fingerprint != header["fingerprint"]:
            raise CheckpointError("config fingerprint does not match stored config")
        return ck

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path):
        return cls.from_bytes(Path(path).read_bytes())


def checkpoint_from_model(model, val_nll=float("nan"), epoch=0, extra=None):
    return Checkpoint(model.kind, model.config_dict(), model.params.state(), model.scale,
                      val_nll, epoch, dict(extra or {}))


def model_from_checkpoint(ck: Checkpoint):
    from .baselines import HawkesModel, NnippConfig, NnippModel
    from .intensity import IntensityModel, ModelConfig

    if ck.model_kind == "proposed":
        model = IntensityModel(ModelConfig.from_dict(ck.model_config))
    elif ck.model_kind == "nnipp":
        model = NnippModel(NnippConfig(**ck.model_config))
    elif ck.model_kind == "hawkes":
        return HawkesModel.from_state(ck.tensors)
    else:
        raise CheckpointError(f"unknown model kind {ck.model_kind!r}")
    model.params.load_state(ck.tensors)
    model.scale = ck.scale
    return model
