"""Shared pytest fixtures for vestido tests."""

from pathlib import Path

import numpy as np
import pytest

from vestido import tensor as T
from vestido.config import RunConfig
from vestido.dataset import Manifest, generate_dataset
from vestido.unet import VtonModel

# Smallest architecture the 64×64 pipeline accepts; used by model tests.
TINY_MODEL = {
    "widths": [8, 16, 32],
    "garment_extra_width": 32,
    "token_dim": 16,
    "num_tokens": 4,
    "decoder_layers": 1,
    "decoder_heads": 2,
    "encoder_heads": 2,
    "appearance_heads": 2,
    "time_dim": 8,
    "time_embed_dim": 16,
    "vae_channels": 8,
}


@pytest.fixture
def rng() -> np.random.Generator:
    """Seeded generator, fresh per test."""
    return np.random.default_rng(1234)


@pytest.fixture
def float64():
    """Run the test body in 64-bit precision."""
    with T.precision(np.float64):
        yield


@pytest.fixture
def tiny_config(tmp_path: Path) -> RunConfig:
    """Smoke preset shrunk further, writing into a temp run directory."""
    return RunConfig.from_dict(
        {
            "run": {"out": str(tmp_path / "run"), "log_every": 1},
            "data": {"path": str(tmp_path / "data"), "n": 16, "n_unseen": 2},
            "model": TINY_MODEL,
            "schedule": {"num_steps": 50},
            "training": {"steps": 2, "batch_size": 4, "vae_steps": 3, "vae_batch_size": 4},
            "sampling": {"steps": 3},
            "metrics": {"feature_steps": 2, "feature_batch_size": 4, "probe_samples": 2},
        },
        preset="smoke",
    )


@pytest.fixture
def tiny_model(tiny_config: RunConfig, rng: np.random.Generator) -> VtonModel:
    """Untrained try-on model with the tiny architecture."""
    return VtonModel.from_config(tiny_config.model, tiny_config.schedule.num_steps, rng)


@pytest.fixture(scope="session")
def dataset_dir(tmp_path_factory: pytest.TempPathFactory) -> Path:
    """A 16-triplet dataset with two unseen-garment probes, shared by the session."""
    root = tmp_path_factory.mktemp("dataset")
    generate_dataset(16, seed=7, out_dir=root, n_unseen=2)
    return root


@pytest.fixture
def manifest(dataset_dir: Path) -> Manifest:
    return Manifest.load(dataset_dir)
