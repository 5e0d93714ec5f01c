"""Versioned training checkpoints.

A checkpoint is one torch archive holding network and optimizer state, the
diffusion schedule parameters, the resolved config, RNG state, loop progress
and the run log so far. Loading uses ``weights_only=True``; the payload is
plain containers, tensors and scalars.
"""

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import torch

from posekey.errors import CheckpointError

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "posekey-ckpt-v1"


@dataclass
class Checkpoint:
    model_kind: str
    num_classes: int
    config: dict[str, Any]
    networks: dict[str, dict[str, torch.Tensor]]
    optimizers: dict[str, dict[str, Any]] = field(default_factory=dict)
    schedule: dict[str, Any] | None = None
    rng_state: torch.Tensor | None = None
    epoch: int = 0
    step: int = 0
    run_log: dict[str, list] = field(default_factory=dict)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "model_kind": ckpt.model_kind,
        "num_classes": ckpt.num_classes,
        "config": ckpt.config,
        "networks": ckpt.networks,
        "optimizers": ckpt.optimizers,
        "schedule": ckpt.schedule,
        "rng_state": ckpt.rng_state,
        "epoch": ckpt.epoch,
        "step": ckpt.step,
        "run_log": ckpt.run_log,
    }
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(payload, tmp)
        os.replace(tmp, path)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc
    logger.info("saved checkpoint %s (epoch %d, step %d)", path, ckpt.epoch, ckpt.step)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        found = payload.get("format") if isinstance(payload, dict) else type(payload).__name__
        raise CheckpointError(
            f"{path} is not a {CHECKPOINT_FORMAT} checkpoint (found {found!r})"
        )
    return Checkpoint(
        model_kind=payload["model_kind"],
        num_classes=int(payload["num_classes"]),
        config=payload["config"],
        networks=payload["networks"],
        optimizers=payload.get("optimizers") or {},
        schedule=payload.get("schedule"),
        rng_state=payload.get("rng_state"),
        epoch=int(payload.get("epoch", 0)),
        step=int(payload.get("step", 0)),
        run_log=payload.get("run_log") or {},
    )
