"""Shared test configuration."""

import logging

import pytest

from posekey import stats_cache
from posekey.config import TrainConfig
from posekey.dataset import generate_dataset
from posekey.synth import make_posture_bank
from posekey.training import train

TINY_SIZE = 32

# Small enough to train a few steps on CPU in well under a second.
TINY_TRAINING = {
    "batch_size": 4,
    "epochs": 1,
    "image_size": TINY_SIZE,
    "diffusion_steps": 20,
    "unet_base_channels": 8,
    "unet_channel_mults": (1, 2),
    "attention_resolutions": (8,),
    "latent_dim": 8,
    "label_dim": 4,
    "gan_hidden": (32, 32),
    "checkpoint_every": 1,
    "snapshot_samples_per_class": 1,
    "log_every": 1,
}


@pytest.fixture(autouse=True)
def posekey_env(monkeypatch):
    """Isolate every test from the caller's posekey environment."""
    for var in ("POSEKEY_OUT_DIR", "POSEKEY_LOG_LEVEL", "POSEKEY_CACHE_ENABLED"):
        monkeypatch.delenv(var, raising=False)
    # console handlers bind to the stream of the test that created them
    root = logging.getLogger("posekey")
    monkeypatch.setattr(root, "handlers", [])
    stats_cache.clear()
    yield
    stats_cache.clear()


@pytest.fixture(scope="session")
def tiny_bank():
    return make_posture_bank(3, seed=0)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory, tiny_bank):
    """3 classes x 10 images at 32x32; 9 train and 1 eval image per class."""
    out = tmp_path_factory.mktemp("tiny-dataset")
    return generate_dataset(tiny_bank, 10, 0.05, (TINY_SIZE, TINY_SIZE), out, seed=0)


@pytest.fixture
def tiny_config(tiny_dataset):
    def _make(**overrides) -> TrainConfig:
        values = {**TINY_TRAINING, "manifest": str(tiny_dataset.root), **overrides}
        return TrainConfig(**values).validate()

    return _make


@pytest.fixture(scope="session")
def tiny_cdiff_checkpoint(tiny_dataset, tmp_path_factory):
    """A one-epoch cdiff checkpoint shared by sampling and evaluation tests."""
    config = TrainConfig(**{**TINY_TRAINING, "model_kind": "cdiff",
                            "manifest": str(tiny_dataset.root)}).validate()
    return train(config, tmp_path_factory.mktemp("tiny-cdiff")).checkpoint
