"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    magic     8 bytes   b"CMOTACKP"
    version   u32
    meta_len  u64
    meta      meta_len bytes of UTF-8 JSON (config, counters, RNG state, provenance)
    records   until end of file, each:
        rec_len  u32   bytes that follow in this record
        name_len u16, name (UTF-8)
        dtype    u8    0=f32 1=f64 2=i64 3=u8
        ndim     u8, then ndim x u64 extents
        payload  row-major little-endian values
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from cmota._config import RunConfig
from cmota.errors import CheckpointError, ConfigHashMismatchError
from cmota.storage import ArtifactStorage

MAGIC = b"CMOTACKP"
VERSION = 1

_HEADER = struct.Struct("<8sIQ")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
_TAGS = {dtype: tag for tag, dtype in _DTYPES.items()}


@dataclass
class Checkpoint:
    meta: dict[str, Any] = field(default_factory=dict)
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def config_hash(self) -> str | None:
        return self.meta.get("config_hash")

    def with_prefix(self, prefix: str) -> dict[str, np.ndarray]:
        """Tensors under ``prefix/``, with the prefix stripped."""
        cut = len(prefix) + 1
        return {k[cut:]: v for k, v in self.tensors.items() if k.startswith(prefix + "/")}


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    meta = json.dumps(ckpt.meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [_HEADER.pack(MAGIC, VERSION, len(meta)), meta]
    for name, array in ckpt.tensors.items():
        arr = np.asarray(array)
        tag = _TAGS.get(arr.dtype)
        if tag is None:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        if arr.ndim > 255:
            raise CheckpointError(f"{name}: too many dimensions")
        encoded_name = name.encode("utf-8")
        body = b"".join(
            [
                struct.pack("<H", len(encoded_name)),
                encoded_name,
                struct.pack("<BB", tag, arr.ndim),
                struct.pack(f"<{arr.ndim}Q", *arr.shape),
                np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes(),
            ]
        )
        chunks.append(struct.pack("<I", len(body)))
        chunks.append(body)
    return b"".join(chunks)


def decode_checkpoint(blob: bytes) -> Checkpoint:
    if len(blob) < _HEADER.size:
        raise CheckpointError("checkpoint shorter than its header")
    magic, version, meta_len = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError("not a cmota checkpoint (bad magic)")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = _HEADER.size
    if pos + meta_len > len(blob):
        raise CheckpointError("checkpoint truncated inside the config blob")
    try:
        meta = json.loads(blob[pos : pos + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint config blob: {exc}") from exc
    pos += meta_len

    tensors: dict[str, np.ndarray] = {}
    while pos < len(blob):
        if pos + 4 > len(blob):
            raise CheckpointError("checkpoint truncated at a record header")
        (rec_len,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        end = pos + rec_len
        if end > len(blob):
            raise CheckpointError("checkpoint truncated inside a record")
        (name_len,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos : pos + name_len].decode("utf-8")
        pos += name_len
        tag, ndim = struct.unpack_from("<BB", blob, pos)
        pos += 2
        if tag not in _DTYPES:
            raise CheckpointError(f"{name}: unknown dtype tag {tag}")
        shape = struct.unpack_from(f"<{ndim}Q", blob, pos)
        pos += 8 * ndim
        dtype = _DTYPES[tag]
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        if pos + count * dtype.itemsize != end:
            raise CheckpointError(f"{name}: payload size does not match shape {shape}")
        values = np.frombuffer(blob, dtype=dtype, count=count, offset=pos).reshape(shape)
        tensors[name] = values.astype(dtype.newbyteorder("="), copy=True)
        pos = end
    return Checkpoint(meta=meta, tensors=tensors)


def save_checkpoint(storage: ArtifactStorage, key: str, ckpt: Checkpoint) -> None:
    storage.write_bytes(key, encode_checkpoint(ckpt))


def load_checkpoint(storage: ArtifactStorage, key: str) -> Checkpoint:
    return decode_checkpoint(storage.read_bytes(key))


def check_config_hash(
    ckpt: Checkpoint, config: RunConfig, artifact: str, *, force: bool = False
) -> None:
    """Refuse a checkpoint produced under another config unless ``force``."""
    found = ckpt.config_hash
    if found is None:
        raise CheckpointError(f"{artifact} carries no config hash")
    if found != config.config_hash and not force:
        raise ConfigHashMismatchError(config.config_hash, found, artifact)
