"""Self-describing checkpoint container.

Layout: magic ``VPCK``, u16 version, u64 header length, canonical-JSON
header, then the tensor payload as little-endian float32 blobs in
name-sorted order.  Loading and re-saving reproduces the byte stream
exactly.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigMismatch, CorruptCheckpoint, FileError

MAGIC = b"VPCK"
VERSION = 1


@dataclass
class Checkpoint:
    config: dict
    manifest_hash: str
    stages: list[str]
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def namespace(self, prefix: str) -> dict[str, np.ndarray]:
        cut = len(prefix) + 1
        return {k[cut:]: v for k, v in self.tensors.items() if k.startswith(prefix + ".")}

    def has_namespace(self, prefix: str) -> bool:
        return any(k.startswith(prefix + ".") for k in self.tensors)

    def to_bytes(self) -> bytes:
        names = sorted(self.tensors)
        index = []
        offset = 0
        blobs = []
        for name in names:
            arr = np.ascontiguousarray(self.tensors[name], dtype="<f4")
            blob = arr.tobytes()
            index.append({"name": name, "shape": list(arr.shape), "offset": offset})
            blobs.append(blob)
            offset += len(blob)
        header = {
            "config": self.config,
            "manifest_hash": self.manifest_hash,
            "stages": self.stages,
            "tensors": index,
        }
        head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        return MAGIC + struct.pack("<H", VERSION) + struct.pack("<Q", len(head)) + head + b"".join(blobs)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        if len(blob) < 14 or blob[:4] != MAGIC:
            raise CorruptCheckpoint("not a VPCK checkpoint")
        (version,) = struct.unpack("<H", blob[4:6])
        if version != VERSION:
            raise CorruptCheckpoint(f"unsupported checkpoint version {version}")
        (head_len,) = struct.unpack("<Q", blob[6:14])
        if len(blob) < 14 + head_len:
            raise CorruptCheckpoint("truncated checkpoint header")
        try:
            header = json.loads(blob[14 : 14 + head_len])
        except json.JSONDecodeError as exc:
            raise CorruptCheckpoint(f"unreadable checkpoint header: {exc}") from exc
        data = blob[14 + head_len :]
        tensors = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            size = int(np.prod(shape)) * 4 if shape else 4
            start = entry["offset"]
            if start + size > len(data):
                raise CorruptCheckpoint(f"truncated tensor payload for {entry['name']}")
            arr = np.frombuffer(data[start : start + size], dtype="<f4").reshape(shape)
            tensors[entry["name"]] = arr.copy()
        return cls(header["config"], header["manifest_hash"], header["stages"], tensors)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        if not path.exists():
            raise FileError(f"checkpoint not found: {path}")
        return cls.from_bytes(path.read_bytes())


def checkpoint_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def require_matching_config(expected: dict, actual: dict, path: str = "") -> None:
    """Raise ConfigMismatch naming the first differing field."""
    for key in sorted(set(expected) | set(actual)):
        where = f"{path}.{key}" if path else key
        if key not in expected or key not in actual:
            raise ConfigMismatch(f"config field {where!r} present on one side only")
        a, b = expected[key], actual[key]
        if isinstance(a, dict) and isinstance(b, dict):
            require_matching_config(a, b, where)
            continue
        if isinstance(a, (list, tuple)) and isinstance(b, (list, tuple)):
            a, b = list(a), list(b)
        if a != b:
            raise ConfigMismatch(f"config field {where!r} differs: expected {a!r}, found {b!r}")
