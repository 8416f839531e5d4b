"""Bit-exact binary checkpoints for base parameters and adapter bundles.

Layout (all integers little-endian):

    8-byte magic ``NANOMTCK``
    u32 format version
    u32 header record count, then per record:
        u32 key length, key bytes, u32 value length, value bytes (UTF-8)
    u64 tensor count, then per tensor:
        u32 name length, name bytes, u32 rank, rank x u64 dims,
        raw little-endian IEEE-754 float64 payload

Base checkpoints carry the model config, the vocabulary, and the final
optimizer accumulators; bundle checkpoints carry only one task's adapter
parameters plus a config hash that ties them to compatible base models.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"NANOMTCK"
VERSION = 1

KIND_BASE = "base"
KIND_BUNDLE = "bundle"

OPTIM_PREFIX = "optim."


def config_hash(d_model: int, num_layers: int) -> str:
    """Compatibility fingerprint shared by a base model and its bundles."""
    payload = f"d_model={d_model};num_layers={num_layers}".encode()
    return hashlib.sha256(payload).hexdigest()[:16]


@dataclass
class Checkpoint:
    header: dict[str, str]
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return self.header.get("kind", "")

    def param_items(self) -> list[tuple[str, np.ndarray]]:
        """Model parameters only, excluding optimizer accumulators."""
        return [(n, a) for n, a in self.tensors.items()
                if not n.startswith(OPTIM_PREFIX)]


def serialize_tensors(items: list[tuple[str, np.ndarray]]) -> bytes:
    """The per-tensor record section; reused for region-identity checks."""
    chunks = [struct.pack("<Q", len(items))]
    for name, array in items:
        raw_name = name.encode("utf-8")
        arr = np.asarray(array, dtype="<f8", order="C")
        chunks.append(struct.pack("<I", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    return b"".join(chunks)


def save_checkpoint(ckpt: Checkpoint, path: Path | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    chunks = [MAGIC, struct.pack("<I", VERSION),
              struct.pack("<I", len(ckpt.header))]
    for key, value in ckpt.header.items():
        raw_k, raw_v = key.encode("utf-8"), value.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw_k)))
        chunks.append(raw_k)
        chunks.append(struct.pack("<I", len(raw_v)))
        chunks.append(raw_v)
    chunks.append(serialize_tensors(list(ckpt.tensors.items())))
    path.write_bytes(b"".join(chunks))
    return path


class _Reader:
    def __init__(self, blob: bytes):
        self._blob = blob
        self._pos = 0

    def take(self, n: int) -> bytes:
        if self._pos + n > len(self._blob):
            raise CheckpointError("truncated checkpoint file")
        out = self._blob[self._pos:self._pos + n]
        self._pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def text(self) -> str:
        return self.take(self.u32()).decode("utf-8")

    @property
    def exhausted(self) -> bool:
        return self._pos == len(self._blob)


def load_checkpoint(path: Path | str) -> Checkpoint:
    reader = _Reader(Path(path).read_bytes())
    if reader.take(8) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    version = reader.u32()
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    header: dict[str, str] = {}
    for _ in range(reader.u32()):
        key = reader.text()
        header[key] = reader.text()
    tensors: dict[str, np.ndarray] = {}
    for _ in range(reader.u64()):
        name = reader.text()
        rank = reader.u32()
        dims = tuple(reader.u64() for _ in range(rank))
        count = int(np.prod(dims)) if dims else 1
        payload = reader.take(8 * count)
        tensors[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
    if not reader.exhausted:
        raise CheckpointError(f"{path}: trailing bytes after tensor records")
    return Checkpoint(header, tensors)


def check_bundle_compatible(base: Checkpoint, bundle: Checkpoint) -> None:
    """A bundle loads only against a base with the matching config hash."""
    if bundle.kind != KIND_BUNDLE:
        raise CheckpointError("expected a bundle checkpoint")
    if base.kind != KIND_BASE:
        raise CheckpointError("expected a base checkpoint")
    if base.header.get("config_hash") != bundle.header.get("config_hash"):
        raise CheckpointError(
            "bundle was built for a different model geometry: hash "
            f"{bundle.header.get('config_hash')} vs {base.header.get('config_hash')}"
        )
