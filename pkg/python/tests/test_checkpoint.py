"""Tests for the binary checkpoint container."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import pytest

from cmota._config import RunConfig
from cmota.checkpoint import (
    MAGIC,
    Checkpoint,
    check_config_hash,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from cmota.errors import CheckpointError, ConfigHashMismatchError
from cmota.storage import LocalStorage


@pytest.fixture
def ckpt() -> Checkpoint:
    rng = np.random.default_rng(0)
    return Checkpoint(
        meta={"config_hash": RunConfig().config_hash, "step": 7, "note": "héllo"},
        tensors={
            "model/w": rng.normal(size=(3, 4)).astype(np.float32),
            "model/b": rng.normal(size=4),
            "opt/step": np.array(7, dtype=np.int64),
            "rng/state": np.arange(5, dtype=np.uint8),
            "empty": np.zeros((0, 3)),
        },
    )


def _assert_same(a: Checkpoint, b: Checkpoint) -> None:
    assert a.meta == b.meta
    assert list(a.tensors) == list(b.tensors)
    for name, value in a.tensors.items():
        assert b.tensors[name].dtype == value.dtype
        np.testing.assert_array_equal(b.tensors[name], value)


class TestContainer:
    def test_round_trip(self, ckpt: Checkpoint) -> None:
        _assert_same(ckpt, decode_checkpoint(encode_checkpoint(ckpt)))

    def test_header(self, ckpt: Checkpoint) -> None:
        blob = encode_checkpoint(ckpt)
        magic, version, _ = struct.unpack_from("<8sIQ", blob)
        assert magic == MAGIC == b"CMOTACKP"
        assert version == 1

    def test_storage_round_trip(self, tmp_path: Path, ckpt: Checkpoint) -> None:
        storage = LocalStorage(tmp_path)
        save_checkpoint(storage, "checkpoints/model.ckpt", ckpt)
        _assert_same(ckpt, load_checkpoint(storage, "checkpoints/model.ckpt"))

    def test_with_prefix(self, ckpt: Checkpoint) -> None:
        assert sorted(ckpt.with_prefix("model")) == ["b", "w"]

    def test_bad_magic(self, ckpt: Checkpoint) -> None:
        blob = bytearray(encode_checkpoint(ckpt))
        blob[:8] = b"NOTACKPT"
        with pytest.raises(CheckpointError, match="magic"):
            decode_checkpoint(bytes(blob))

    def test_unknown_version(self, ckpt: Checkpoint) -> None:
        blob = bytearray(encode_checkpoint(ckpt))
        struct.pack_into("<I", blob, 8, 99)
        with pytest.raises(CheckpointError, match="version"):
            decode_checkpoint(bytes(blob))

    @pytest.mark.parametrize("cut", [4, 20, 40, -1, -9])
    def test_truncated(self, ckpt: Checkpoint, cut: int) -> None:
        blob = encode_checkpoint(ckpt)
        with pytest.raises(CheckpointError):
            decode_checkpoint(blob[:cut])

    def test_corrupt_meta(self, ckpt: Checkpoint) -> None:
        blob = bytearray(encode_checkpoint(ckpt))
        blob[20] = 0xFF
        with pytest.raises(CheckpointError):
            decode_checkpoint(bytes(blob))

    def test_unsupported_dtype(self) -> None:
        with pytest.raises(CheckpointError):
            encode_checkpoint(Checkpoint(tensors={"x": np.zeros(2, dtype=np.complex64)}))


class TestConfigHash:
    def test_matching_hash(self, ckpt: Checkpoint) -> None:
        check_config_hash(ckpt, RunConfig(), "model.ckpt")

    def test_mismatch(self, ckpt: Checkpoint) -> None:
        other = RunConfig().replace(seed=1)
        with pytest.raises(ConfigHashMismatchError) as excinfo:
            check_config_hash(ckpt, other, "model.ckpt")
        assert excinfo.value.found == RunConfig().config_hash
        assert excinfo.value.expected == other.config_hash

    def test_force(self, ckpt: Checkpoint) -> None:
        check_config_hash(ckpt, RunConfig().replace(seed=1), "model.ckpt", force=True)

    def test_missing_hash(self) -> None:
        with pytest.raises(CheckpointError):
            check_config_hash(Checkpoint(), RunConfig(), "model.ckpt", force=True)
