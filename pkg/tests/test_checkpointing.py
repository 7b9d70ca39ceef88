"""Checkpoint container: bit-exact round trips, checksums, versioning."""

import pytest
import torch

from gatedcl.checkpointing import (FORMAT_VERSION, MAGIC, load_checkpoint,
                                   save_checkpoint)
from gatedcl.errors import CheckpointError


def sample_state():
    g = torch.Generator().manual_seed(0)
    return {
        "weights": torch.randn(4, 3, 3, 3, generator=g),
        "bias": torch.randn(4, generator=g, dtype=torch.float64),
        "owner": torch.tensor([-1, 1, 2, -1]),
        "mask": torch.tensor([True, False, True, True]),
        "rng": torch.randint(0, 255, (16,), generator=g, dtype=torch.uint8),
    }


class TestRoundTrip:
    def test_tensors_and_meta_survive_exactly(self, tmp_path):
        path = str(tmp_path / "a.ckpt")
        state = sample_state()
        meta = {"version": 1, "note": "x", "nested": {"k": [1, 2]}}
        save_checkpoint(path, state, meta)
        loaded, loaded_meta = load_checkpoint(path)
        assert loaded_meta == meta
        assert set(loaded) == set(state)
        for k in state:
            assert torch.equal(loaded[k], state[k])
            assert loaded[k].dtype == state[k].dtype

    def test_save_load_save_is_byte_identical(self, tmp_path):
        p1, p2 = str(tmp_path / "a.ckpt"), str(tmp_path / "b.ckpt")
        state = sample_state()
        save_checkpoint(p1, state, {"m": 3})
        loaded, meta = load_checkpoint(p1)
        save_checkpoint(p2, loaded, meta)
        assert open(p1, "rb").read() == open(p2, "rb").read()

    def test_channels_last_tensors_serialize_canonically(self, tmp_path):
        x = torch.randn(2, 3, 4, 4).to(memory_format=torch.channels_last)
        p = str(tmp_path / "c.ckpt")
        save_checkpoint(p, {"x": x}, {})
        loaded, _ = load_checkpoint(p)
        assert torch.equal(loaded["x"], x)


class TestCorruption:
    def test_flipped_payload_byte_names_the_section(self, tmp_path):
        path = str(tmp_path / "a.ckpt")
        save_checkpoint(path, sample_state(), {})
        data = bytearray(open(path, "rb").read())
        data[-3] ^= 0xFF  # inside the last section ("weights" sorts last)
        open(path, "wb").write(bytes(data))
        with pytest.raises(CheckpointError, match="checksum failure.*weights"):
            load_checkpoint(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = str(tmp_path / "junk")
        open(path, "wb").write(b"NOTACKPT" + b"\x00" * 32)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_version_mismatch_rejected(self, tmp_path):
        path = str(tmp_path / "a.ckpt")
        save_checkpoint(path, {}, {})
        data = bytearray(open(path, "rb").read())
        data[len(MAGIC)] = FORMAT_VERSION + 1
        open(path, "wb").write(bytes(data))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path)

    def test_truncated_section_detected(self, tmp_path):
        path = str(tmp_path / "a.ckpt")
        save_checkpoint(path, sample_state(), {})
        data = open(path, "rb").read()
        open(path, "wb").write(data[:-10])
        with pytest.raises(CheckpointError, match="truncated|checksum"):
            load_checkpoint(path)
