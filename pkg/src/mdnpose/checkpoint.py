"""Bit-exact checkpoint files.

Layout: the 8-byte magic ``MDNCKPT1``, a little-endian ``uint32`` descriptor
length, a UTF-8 JSON descriptor, then every array as little-endian float64
in the order the descriptor lists them.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from .data import NormStats
from .errors import DimensionError, ParseError, ProvenanceError
from .model import Architecture, MdnPoseNet
from .optim import AdamState

MAGIC = b"MDNCKPT1"
VERSION = 1
_STATS_KEYS = ("mean_x", "std_x", "mean_y", "std_y")


@dataclass
class Checkpoint:
    arch: Architecture
    stats: NormStats
    weights: Dict[str, np.ndarray]
    optimizer: Optional[AdamState] = None
    train: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: MdnPoseNet, stats: NormStats, optimizer: Optional[AdamState] = None,
                   train: Optional[dict] = None) -> "Checkpoint":
        weights = {k: v.copy() for k, v in model.state_arrays().items()}
        opt = None
        if optimizer is not None:
            opt = AdamState([m.copy() for m in optimizer.m], [v.copy() for v in optimizer.v], optimizer.step,
                            optimizer.beta1, optimizer.beta2, optimizer.epsilon)
        return cls(model.arch, stats, weights, opt, dict(train or {}))

    def build_model(self) -> MdnPoseNet:
        model = MdnPoseNet(self.arch)
        model.load_state_arrays(self.weights)
        return model

    def check_compatible(self, n_joints: int, M: Optional[int] = None) -> None:
        if n_joints != self.arch.n_joints:
            raise DimensionError(f"checkpoint expects N={self.arch.n_joints} joints, data has N={n_joints}")
        if M is not None and M != self.arch.M:
            raise DimensionError(f"checkpoint has M={self.arch.M} kernels, expected M={M}")


def to_bytes(ckpt: Checkpoint) -> bytes:
    arrays = [(f"stats.{k}", getattr(ckpt.stats, k)) for k in _STATS_KEYS]
    arrays += [(f"weights.{k}", v) for k, v in ckpt.weights.items()]
    optimizer = None
    if ckpt.optimizer is not None:
        opt = ckpt.optimizer
        optimizer = {"step": opt.step, "beta1": opt.beta1, "beta2": opt.beta2, "epsilon": opt.epsilon,
                     "count": len(opt.m)}
        arrays += [(f"adam.m.{i}", m) for i, m in enumerate(opt.m)]
        arrays += [(f"adam.v.{i}", v) for i, v in enumerate(opt.v)]
    descriptor = {
        "format": "mdnpose-checkpoint",
        "version": VERSION,
        "arch": ckpt.arch.to_dict(),
        "stats_fingerprint": ckpt.stats.fingerprint(),
        "optimizer": optimizer,
        "train": ckpt.train,
        "weight_names": list(ckpt.weights),
        "arrays": [[name, list(np.shape(a))] for name, a in arrays],
    }
    desc = json.dumps(descriptor, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays)
    return MAGIC + struct.pack("<I", len(desc)) + desc + body


def from_bytes(blob: bytes) -> Checkpoint:
    if blob[:8] != MAGIC:
        raise ParseError("not a checkpoint file (bad magic)")
    (length,) = struct.unpack("<I", blob[8:12])
    try:
        desc = json.loads(blob[12:12 + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"corrupt checkpoint descriptor: {exc}") from None
    if desc.get("version") != VERSION:
        raise ParseError(f"unsupported checkpoint version {desc.get('version')!r}")
    offset = 12 + length
    arrays = {}
    for name, shape in desc["arrays"]:
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(blob):
            raise ParseError(f"checkpoint truncated while reading {name}")
        arrays[name] = np.frombuffer(blob[offset:end], dtype="<f8").astype(np.float64).reshape(shape)
        offset = end
    if offset != len(blob):
        raise ParseError("trailing bytes after the last checkpoint array")
    stats = NormStats(*(arrays[f"stats.{k}"] for k in _STATS_KEYS))
    if stats.fingerprint() != desc["stats_fingerprint"]:
        raise ProvenanceError("normalization statistics do not match the recorded fingerprint")
    weights = {k: arrays[f"weights.{k}"] for k in desc["weight_names"]}
    optimizer = None
    if desc["optimizer"] is not None:
        o = desc["optimizer"]
        optimizer = AdamState([arrays[f"adam.m.{i}"] for i in range(o["count"])],
                              [arrays[f"adam.v.{i}"] for i in range(o["count"])],
                              o["step"], o["beta1"], o["beta2"], o["epsilon"])
    return Checkpoint(Architecture.from_dict(desc["arch"]), stats, weights, optimizer, desc["train"])


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
