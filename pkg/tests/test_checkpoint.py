"""Tests for checkpoint save/load."""

import struct
from pathlib import Path

import numpy as np
import pytest

from vestido import tensor as T
from vestido.checkpoint import MAGIC, load_checkpoint, save_checkpoint
from vestido.errors import DatasetError, IntegrityError
from vestido.nn import Linear, Module
from vestido.optim import Adam


class Tiny(Module):
    def __init__(self, rng: np.random.Generator) -> None:
        self.layer = Linear(3, 2, rng)


def trained(rng: np.random.Generator) -> tuple[Tiny, Adam]:
    model = Tiny(rng)
    optimizer = Adam(model.named_parameters(), lr=0.01)
    for _ in range(3):
        optimizer.zero_grad()
        out = model.layer(T.ones((1, 3)))
        (out * out).sum().backward()
        optimizer.step()
    return model, optimizer


@pytest.fixture
def saved(tmp_path: Path, rng: np.random.Generator) -> tuple[Path, Tiny, Adam]:
    model, optimizer = trained(rng)
    path = save_checkpoint(
        tmp_path / "ckpt" / "model.ckpt",
        "vton",
        model,
        {"model": {"widths": [8]}},
        step=optimizer.state.t,
        adam=optimizer.state,
        rng=rng,
        extra={"loss": 0.5},
    )
    return path, model, optimizer


class TestRoundTrip:
    """Tests for save_checkpoint followed by load_checkpoint."""

    def test_header_fields(self, saved) -> None:
        path, _, _ = saved
        ckpt = load_checkpoint(path, kind="vton")
        assert path.read_bytes().startswith(MAGIC)
        assert ckpt.kind == "vton"
        assert ckpt.step == 3
        assert ckpt.config == {"model": {"widths": [8]}}
        assert ckpt.extra == {"loss": 0.5}

    def test_parameters_restored(self, saved) -> None:
        path, model, _ = saved
        fresh = load_checkpoint(path).restore(Tiny(np.random.default_rng(99)))
        assert fresh.ready
        np.testing.assert_array_equal(fresh.layer.weight.data, model.layer.weight.data)

    def test_adam_state_restored(self, saved) -> None:
        path, _, optimizer = saved
        adam = load_checkpoint(path).adam
        assert adam.t == 3
        assert adam.lr == optimizer.state.lr
        for name, moment in optimizer.state.m.items():
            np.testing.assert_array_equal(adam.m[name], moment.astype(np.float32))
            np.testing.assert_array_equal(adam.v[name], optimizer.state.v[name].astype(np.float32))

    def test_generator_continues_stream(self, saved, rng: np.random.Generator) -> None:
        """Test that the restored generator yields what the saved one would."""
        path, _, _ = saved
        restored = load_checkpoint(path).generator()
        np.testing.assert_array_equal(restored.random(5), rng.random(5))

    def test_without_optimizer(self, tmp_path: Path, rng: np.random.Generator) -> None:
        path = save_checkpoint(tmp_path / "vae.ckpt", "vae", Tiny(rng), {})
        ckpt = load_checkpoint(path)
        assert ckpt.adam is None
        assert ckpt.generator() is None
        assert sorted(ckpt.tensors) == ["layer.bias", "layer.weight"]


class TestCorruption:
    """Tests for load_checkpoint integrity checks."""

    def test_missing_file(self, tmp_path: Path) -> None:
        with pytest.raises(DatasetError, match="not found"):
            load_checkpoint(tmp_path / "absent.ckpt")

    def test_bad_magic(self, saved) -> None:
        path, _, _ = saved
        path.write_bytes(b"XXXXX" + path.read_bytes()[5:])
        with pytest.raises(IntegrityError, match="magic"):
            load_checkpoint(path)

    def test_future_version(self, saved) -> None:
        path, _, _ = saved
        blob = path.read_bytes()
        path.write_bytes(blob[:5] + struct.pack("<I", 7) + blob[9:])
        with pytest.raises(IntegrityError, match="version"):
            load_checkpoint(path)

    def test_payload_bit_flip(self, saved) -> None:
        path, _, _ = saved
        blob = bytearray(path.read_bytes())
        blob[-1] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(IntegrityError, match="checksum"):
            load_checkpoint(path)

    def test_truncated(self, saved) -> None:
        path, _, _ = saved
        path.write_bytes(path.read_bytes()[:8])
        with pytest.raises(IntegrityError, match="truncated"):
            load_checkpoint(path)

    def test_kind_mismatch(self, saved) -> None:
        path, _, _ = saved
        with pytest.raises(IntegrityError, match="expected 'vae'"):
            load_checkpoint(path, kind="vae")

    def test_architecture_mismatch(self, saved) -> None:
        path, _, _ = saved

        class Wider(Module):
            def __init__(self) -> None:
                self.layer = Linear(4, 2, np.random.default_rng(0))

        with pytest.raises(IntegrityError, match="layer.weight"):
            load_checkpoint(path).restore(Wider())
