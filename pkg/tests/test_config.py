"""Tests for config.py: file/override priority, coercion and output directories."""

import json
import os
from pathlib import Path
from unittest.mock import patch

import pytest

from posekey.config import (
    TrainConfig,
    config_hash,
    load_config,
    resolve_config,
    resolve_out_dir,
    write_snapshot,
)
from posekey.errors import ArgumentError, ConfigError


class TestPriority:
    def test_defaults(self):
        config = resolve_config()
        assert config == TrainConfig()
        assert config.lambda_kp == 1.0 and config.image_size == 128

    def test_file_overrides_defaults(self, tmp_path):
        path = tmp_path / "run.toml"
        path.write_text('model_kind = "cgan"\nepochs = 3\nunet_channel_mults = [1, 2]\n')
        config = resolve_config(path)
        assert config.model_kind == "cgan"
        assert config.epochs == 3
        assert config.unet_channel_mults == (1, 2)

    def test_flags_override_file(self, tmp_path):
        path = tmp_path / "run.toml"
        path.write_text("epochs = 3\nseed = 4\n")
        config = resolve_config(path, {"epochs": 9, "seed": None})
        assert config.epochs == 9
        assert config.seed == 4

    def test_int_to_float_coercion(self):
        assert resolve_config(overrides={"lambda_kp": 2}).lambda_kp == 2.0


class TestValidation:
    def test_unknown_key_in_file(self, tmp_path):
        path = tmp_path / "run.toml"
        path.write_text("epoch = 3\n")
        with pytest.raises(ConfigError, match="epoch"):
            load_config(path)

    def test_nested_table(self, tmp_path):
        path = tmp_path / "run.toml"
        path.write_text("[train]\nepochs = 3\n")
        with pytest.raises(ConfigError, match="flat"):
            load_config(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "nope.toml")

    def test_unparseable_file(self, tmp_path):
        path = tmp_path / "run.toml"
        path.write_text("epochs = = 3\n")
        with pytest.raises(ConfigError, match="cannot parse"):
            load_config(path)

    @pytest.mark.parametrize("overrides", [
        {"model_kind": "vae"},
        {"lambda_kp": -1.0},
        {"lambda_pose": float("nan")},
        {"batch_size": 0},
        {"label_dropout": 1.0},
        {"learning_rate": 0.0},
        {"image_size": 100},
        {"epochs": 2.5},
        {"unet_channel_mults": [1, "2"]},
    ])
    def test_rejected_values(self, overrides):
        with pytest.raises(ConfigError):
            resolve_config(overrides=overrides)

    def test_gan_ignores_unet_divisibility(self):
        assert resolve_config(overrides={"model_kind": "cgan", "image_size": 100})

    def test_config_error_is_argument_error(self):
        assert issubclass(ConfigError, ArgumentError)


class TestKinds:
    @pytest.mark.parametrize("kind,diffusion,pose", [
        ("cgan", False, False),
        ("cgan_pose", False, True),
        ("cdiff", True, False),
        ("cdiff_pose", True, True),
    ])
    def test_flags(self, kind, diffusion, pose):
        config = TrainConfig(model_kind=kind)
        assert config.is_diffusion is diffusion
        assert config.uses_pose is pose


class TestHashAndSnapshot:
    def test_hash_is_stable_and_sensitive(self):
        assert config_hash(TrainConfig()) == config_hash(TrainConfig())
        assert config_hash(TrainConfig()) != config_hash(TrainConfig(seed=1))

    def test_dict_roundtrip(self):
        config = TrainConfig(gan_hidden=(8, 16))
        assert TrainConfig.from_dict(config.to_dict()) == config

    def test_snapshot(self, tmp_path):
        path = write_snapshot(tmp_path / "out", "train", {"seed": 3, "where": Path("/x")})
        data = json.loads(path.read_text())
        assert data == {"command": "train", "seed": 3, "where": "/x"}


class TestOutDir:
    def test_flag_wins(self):
        with patch.dict(os.environ, {"POSEKEY_OUT_DIR": "/env"}):
            assert resolve_out_dir("/flag", "eval") == Path("/flag")

    def test_env_root(self):
        with patch.dict(os.environ, {"POSEKEY_OUT_DIR": "/env"}):
            assert resolve_out_dir(None, "eval") == Path("/env/eval")

    def test_default_root(self):
        os.environ.pop("POSEKEY_OUT_DIR", None)
        assert resolve_out_dir(None, "dataset") == Path("runs/dataset")
