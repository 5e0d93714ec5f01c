"""Run configuration: flat TOML files, CLI overrides and environment defaults."""

import dataclasses
import hashlib
import json
import math
import os
import tomllib
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

from posekey.errors import ConfigError

MODEL_KINDS = ("cgan", "cgan_pose", "cdiff", "cdiff_pose")
POSE_TARGETS = ("extracted", "annotated")
DEFAULT_OUT_ROOT = "runs"


@dataclass(frozen=True)
class TrainConfig:
    model_kind: str = "cdiff_pose"
    batch_size: int = 10
    learning_rate: float = 2e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    epochs: int = 30
    lambda_kp: float = 1.0
    lambda_pose: float = 1.0
    seed: int = 0
    image_size: int = 128
    manifest: str = ""
    # diffusion
    diffusion_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    guidance_scale: float = 0.0
    label_dropout: float = 0.1
    unet_base_channels: int = 64
    unet_channel_mults: tuple[int, ...] = (1, 2, 4, 8)
    attention_resolutions: tuple[int, ...] = (16, 8)
    # gan
    latent_dim: int = 128
    label_dim: int = 64
    gan_hidden: tuple[int, ...] = (256, 512, 1024)
    # loop
    pose_target: str = "extracted"
    checkpoint_every: int = 5
    snapshot_samples_per_class: int = 1
    log_every: int = 50

    @property
    def image_dims(self) -> tuple[int, int]:
        return (self.image_size, self.image_size)

    @property
    def is_diffusion(self) -> bool:
        return self.model_kind.startswith("cdiff")

    @property
    def uses_pose(self) -> bool:
        return self.model_kind.endswith("_pose")

    def to_dict(self) -> dict[str, Any]:
        data = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in data.items()}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "TrainConfig":
        return _build(data)

    def validate(self) -> "TrainConfig":
        if self.model_kind not in MODEL_KINDS:
            raise ConfigError(f"model_kind must be one of {', '.join(MODEL_KINDS)}, "
                              f"got '{self.model_kind}'")
        if self.pose_target not in POSE_TARGETS:
            raise ConfigError(f"pose_target must be one of {', '.join(POSE_TARGETS)}")
        for name in ("batch_size", "image_size", "diffusion_steps", "latent_dim", "label_dim",
                     "unet_base_channels", "checkpoint_every", "log_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.epochs < 0 or self.snapshot_samples_per_class < 0:
            raise ConfigError("epochs and snapshot_samples_per_class must be >= 0")
        if not (math.isfinite(self.learning_rate) and self.learning_rate > 0):
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        for name in ("lambda_kp", "lambda_pose", "guidance_scale"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ConfigError(f"{name} must be finite and >= 0, got {value}")
        if not 0 <= self.label_dropout < 1:
            raise ConfigError(f"label_dropout must be in [0, 1), got {self.label_dropout}")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if not 0 < self.beta_start <= self.beta_end < 1:
            raise ConfigError("need 0 < beta_start <= beta_end < 1")
        factor = 2 ** len(self.unet_channel_mults)
        if self.is_diffusion and self.image_size % factor:
            raise ConfigError(f"image_size must be divisible by {factor} for diffusion models")
        return self


_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _coerce(key: str, value: Any) -> Any:
    kind = _FIELD_TYPES[key]
    try:
        if kind is bool:
            return bool(value)
        if kind is int:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise TypeError
            return int(value)
        if kind is float:
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if kind is str:
            if not isinstance(value, (str, Path)):
                raise TypeError
            return str(value)
        # tuple[int, ...]
        if not isinstance(value, (list, tuple)) or not all(
            isinstance(v, int) and not isinstance(v, bool) for v in value
        ):
            raise TypeError
        return tuple(int(v) for v in value)
    except (TypeError, ValueError):
        raise ConfigError(f"config key '{key}' has an invalid value {value!r}") from None


def _build(values: dict[str, Any]) -> TrainConfig:
    unknown = sorted(set(values) - set(_FIELD_TYPES))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    return TrainConfig(**{k: _coerce(k, v) for k, v in values.items()}).validate()


def load_config(path: str | Path) -> dict[str, Any]:
    """Parse a flat TOML config file into raw key/value pairs."""
    path = Path(path)
    try:
        with path.open("rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    nested = [k for k, v in data.items() if isinstance(v, dict)]
    if nested:
        raise ConfigError(f"config must be flat; found table(s): {', '.join(nested)}")
    unknown = sorted(set(data) - set(_FIELD_TYPES))
    if unknown:
        raise ConfigError(f"unknown config key(s) in {path}: {', '.join(unknown)}")
    return data


def resolve_config(
    path: str | Path | None = None, overrides: dict[str, Any] | None = None
) -> TrainConfig:
    """Defaults, then the config file, then non-None ``overrides``."""
    values: dict[str, Any] = {}
    if path is not None:
        values.update(load_config(path))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return _build(values)


def resolve_out_dir(flag: str | Path | None, default_name: str) -> Path:
    """Output directory by priority.

    1. ``--out-dir`` flag
    2. ``$POSEKEY_OUT_DIR/<default_name>``
    3. ``./runs/<default_name>``
    """
    if flag:
        return Path(flag)
    root = os.environ.get("POSEKEY_OUT_DIR", "").strip()
    return Path(root or DEFAULT_OUT_ROOT) / default_name


def config_hash(config: TrainConfig) -> str:
    canonical = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def write_snapshot(out_dir: Path, command: str, values: dict[str, Any]) -> Path:
    """Record what a command actually ran with as ``resolved_config.json``."""
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "resolved_config.json"
    payload = {"command": command, **values}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")
    return path
