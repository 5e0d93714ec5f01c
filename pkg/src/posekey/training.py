"""Composite objectives, train steps and the epoch loop for all four model kinds.

The four configurations are one codebase with two switches: ``cgan``/``cdiff``
train with the model-native loss only, ``*_pose`` kinds add
λ_kp·L_kp + λ_pose·L_pose computed through the differentiable extractor.
"""

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import torch
import torch.nn as nn

from posekey.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from posekey.config import TrainConfig
from posekey.dataset import (
    CanonicalPoses,
    DatasetManifest,
    PostureBatch,
    Split,
    canonical_keypoints,
    load_dataset,
)
from posekey.diffusion import (
    DiffusionSchedule,
    ddpm_sample,
    diffusion_recon_loss,
    make_beta_schedule,
    predict_x0,
)
from posekey.errors import ArgumentError, CheckpointError, ConfigError, DivergenceError
from posekey.gan import GanPair, build_gan_pair, gan_adversarial_losses, gan_generate
from posekey.metrics import mean_keypoint_error
from posekey.pose_extract import ColorCodedExtractor
from posekey.run_logging import log_event
from posekey.skeleton import (
    DEFAULT_TOPOLOGY,
    LossWeights,
    SkeletonTopology,
    feature_distance,
    keypoint_distance,
    relative_feature_tensor,
)
from posekey.synth import derive_seed
from posekey.unet import DiffusionUNet

logger = logging.getLogger(__name__)

RUNLOG_COLUMNS = ("step", "epoch", "l_adv_or_recon", "l_kp", "l_pose", "l_total", "wall_ms")
EPOCH_COLUMNS = ("epoch", "step", "mean_kp_err", "kp_missing", "mean_l_total")
SAMPLE_CHUNK = 50


# ---------------------------------------------------------------------------
# Run log
# ---------------------------------------------------------------------------

@dataclass
class StepRecord:
    step: int
    epoch: int
    l_main: float
    l_kp: float
    l_pose: float
    l_total: float
    wall_ms: float
    l_disc: float | None = None

    def row(self) -> list:
        return [self.step, self.epoch, self.l_main, self.l_kp, self.l_pose, self.l_total,
                round(self.wall_ms, 3)]


@dataclass
class EpochSnapshot:
    epoch: int
    step: int
    mean_kp_err: float
    kp_missing: int
    mean_l_total: float

    def row(self) -> list:
        return [self.epoch, self.step, self.mean_kp_err, self.kp_missing, self.mean_l_total]


@dataclass
class RunLog:
    steps: list[StepRecord] = field(default_factory=list)
    epochs: list[EpochSnapshot] = field(default_factory=list)

    def append(self, record: StepRecord) -> None:
        if self.steps and record.step <= self.steps[-1].step:
            raise ArgumentError(
                f"step {record.step} does not follow step {self.steps[-1].step}"
            )
        self.steps.append(record)

    def total_losses(self) -> list[float]:
        return [r.l_total for r in self.steps]

    def to_dict(self) -> dict[str, list]:
        return {"steps": [asdict(r) for r in self.steps],
                "epochs": [asdict(e) for e in self.epochs]}

    @classmethod
    def from_dict(cls, data: dict[str, list]) -> "RunLog":
        return cls([StepRecord(**r) for r in data.get("steps", [])],
                   [EpochSnapshot(**e) for e in data.get("epochs", [])])

    def write_csv(self, out_dir: Path) -> tuple[Path, Path]:
        steps_path, epochs_path = out_dir / "runlog.csv", out_dir / "epochs.csv"
        for path, columns, rows in (
            (steps_path, RUNLOG_COLUMNS, [r.row() for r in self.steps]),
            (epochs_path, EPOCH_COLUMNS, [e.row() for e in self.epochs]),
        ):
            with path.open("w", newline="") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(columns)
                writer.writerows(rows)
        return steps_path, epochs_path


# ---------------------------------------------------------------------------
# Objectives
# ---------------------------------------------------------------------------

def effective_weights(config: TrainConfig) -> LossWeights:
    """λ as configured for ``*_pose`` kinds, zero for the baselines."""
    if not config.uses_pose:
        return LossWeights(0.0, 0.0)
    return LossWeights(config.lambda_kp, config.lambda_pose)


def _check_finite(component: str, value, step: int | None) -> None:
    if not math.isfinite(float(value)):
        raise DivergenceError(component, step)


def _composite(main_name, main, l_kp, l_pose, weights: LossWeights, step):
    _check_finite(main_name, main, step)
    _check_finite("l_kp", l_kp, step)
    _check_finite("l_pose", l_pose, step)
    total = main
    if weights.lambda_kp:
        total = total + weights.lambda_kp * l_kp
    if weights.lambda_pose:
        total = total + weights.lambda_pose * l_pose
    return total


def composite_gan_objective(l_adv, l_kp, l_pose, weights: LossWeights, step: int | None = None):
    """L_adv + λ_kp·L_kp + λ_pose·L_pose; works on floats or scalar tensors."""
    return _composite("l_adv", l_adv, l_kp, l_pose, weights, step)


def composite_diffusion_objective(
    l_recon, l_kp, l_pose, weights: LossWeights, step: int | None = None
):
    return _composite("l_recon", l_recon, l_kp, l_pose, weights, step)


class PoseLosses(NamedTuple):
    kp: torch.Tensor
    pose: torch.Tensor


def pose_supervision_losses(
    generated: torch.Tensor,
    real: torch.Tensor,
    extractor: ColorCodedExtractor,
    weights: LossWeights,
    topology: SkeletonTopology = DEFAULT_TOPOLOGY,
    real_keypoints: torch.Tensor | None = None,
    real_visibility: torch.Tensor | None = None,
) -> PoseLosses:
    """Batch-mean L_kp and L_pose between generated and paired real images.

    Only terms with a nonzero weight are computed; the others are exactly 0.
    The generated pose counts as fully visible; the mask is real-side visibility.
    """
    zero = generated.new_zeros(())
    if not weights.active:
        return PoseLosses(zero, zero)
    if not getattr(extractor, "differentiable", False):
        raise ArgumentError("pose supervision needs a differentiable extractor")

    height, width = generated.shape[-2:]
    scale = torch.tensor([width, height], dtype=generated.dtype)
    gen_coords, _ = extractor.extract_batch(generated)
    if real_keypoints is None:
        with torch.no_grad():
            real_keypoints, real_visibility = extractor.extract_batch(real)
    elif real_visibility is None:
        real_visibility = torch.ones(real_keypoints.shape[:-1], dtype=torch.bool)
    gen_norm = gen_coords / scale
    real_norm = real_keypoints.to(generated.dtype) / scale

    l_kp = zero
    if weights.lambda_kp:
        per_sample, count = keypoint_distance(gen_norm, real_norm, real_visibility)
        defined = count > 0
        if bool(defined.any()):
            l_kp = per_sample[defined].mean()

    l_pose = zero
    if weights.lambda_pose:
        gen_feats, gen_valid, _ = relative_feature_tensor(gen_norm, topology)
        real_feats, real_valid, _ = relative_feature_tensor(real_norm, topology, real_visibility)
        l_pose = feature_distance(gen_feats, real_feats, gen_valid & real_valid).mean()
    return PoseLosses(l_kp, l_pose)


# ---------------------------------------------------------------------------
# Training state
# ---------------------------------------------------------------------------

@dataclass
class TrainingState:
    config: TrainConfig
    num_classes: int
    networks: dict[str, nn.Module]
    optimizers: dict[str, torch.optim.Optimizer]
    rng: torch.Generator
    schedule: DiffusionSchedule | None = None
    epoch: int = 0
    step: int = 0
    run_log: RunLog = field(default_factory=RunLog)

    @property
    def gan(self) -> GanPair:
        return GanPair(self.networks["generator"], self.networks["discriminator"])

    @property
    def unet(self) -> DiffusionUNet:
        return self.networks["unet"]


def _adam(module: nn.Module, config: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(module.parameters(), lr=config.learning_rate,
                            betas=(config.adam_beta1, config.adam_beta2))


def build_networks(config: TrainConfig, num_classes: int) -> dict[str, nn.Module]:
    if config.is_diffusion:
        return {"unet": DiffusionUNet(
            config.image_size, num_classes, config.unet_base_channels,
            config.unet_channel_mults, config.attention_resolutions,
        )}
    pair = build_gan_pair(config.image_size, num_classes, config.latent_dim,
                          config.label_dim, config.gan_hidden)
    return {"generator": pair.generator, "discriminator": pair.discriminator}


def build_state(config: TrainConfig, num_classes: int) -> TrainingState:
    """Fresh networks, Adam optimizers and the seeded training RNG."""
    torch.manual_seed(derive_seed(config.seed, "init"))
    networks = build_networks(config, num_classes)
    schedule = None
    if config.is_diffusion:
        schedule = make_beta_schedule(config.diffusion_steps, config.beta_start, config.beta_end)
    return TrainingState(
        config=config,
        num_classes=num_classes,
        networks=networks,
        optimizers={name: _adam(net, config) for name, net in networks.items()},
        rng=torch.Generator().manual_seed(derive_seed(config.seed, "train")),
        schedule=schedule,
    )


def state_to_checkpoint(state: TrainingState) -> Checkpoint:
    return Checkpoint(
        model_kind=state.config.model_kind,
        num_classes=state.num_classes,
        config=state.config.to_dict(),
        networks={name: net.state_dict() for name, net in state.networks.items()},
        optimizers={name: opt.state_dict() for name, opt in state.optimizers.items()},
        schedule=state.schedule.to_dict() if state.schedule is not None else None,
        rng_state=state.rng.get_state(),
        epoch=state.epoch,
        step=state.step,
        run_log=state.run_log.to_dict(),
    )


def restore_state(ckpt: Checkpoint, config: TrainConfig | None = None) -> TrainingState:
    """Rebuild a training state; ``config`` may only differ from the saved one in epochs."""
    saved = TrainConfig.from_dict(ckpt.config)
    if config is not None:
        ours, theirs = config.to_dict(), saved.to_dict()
        ours.pop("epochs"), theirs.pop("epochs")
        if ours != theirs:
            changed = sorted(k for k in ours if ours[k] != theirs.get(k))
            raise CheckpointError(f"config differs from checkpoint in: {', '.join(changed)}")
        saved = config
    state = build_state(saved, ckpt.num_classes)
    try:
        for name, net in state.networks.items():
            net.load_state_dict(ckpt.networks[name])
        for name, opt in state.optimizers.items():
            if name in ckpt.optimizers:
                opt.load_state_dict(ckpt.optimizers[name])
    except (KeyError, RuntimeError) as exc:
        raise CheckpointError(
            f"checkpoint does not fit a {saved.model_kind} model: {exc}"
        ) from exc
    if ckpt.rng_state is not None:
        state.rng.set_state(ckpt.rng_state)
    state.epoch, state.step = ckpt.epoch, ckpt.step
    state.run_log = RunLog.from_dict(ckpt.run_log)
    return state


# ---------------------------------------------------------------------------
# Train steps
# ---------------------------------------------------------------------------

def _check_gradients(module: nn.Module, component: str, step: int) -> None:
    for param in module.parameters():
        if param.grad is not None and not bool(torch.isfinite(param.grad).all()):
            raise DivergenceError(component, step)


def _pose_targets(state: TrainingState, batch: PostureBatch):
    if state.config.pose_target == "annotated":
        return batch.keypoints, batch.visibility
    return None, None


def gan_train_step(
    state: TrainingState, batch: PostureBatch, extractor: ColorCodedExtractor
) -> StepRecord:
    """One discriminator update, then one generator update on the composite loss.

    Fakes reuse the real batch labels, so generated image i pairs with real image i.
    """
    start = time.perf_counter()
    step = state.step + 1
    weights = effective_weights(state.config)
    pair = state.gan
    real, y = batch.images, batch.labels
    latent = (real.shape[0], pair.latent_dim)

    with torch.no_grad():
        fake = gan_generate(pair, torch.randn(latent, generator=state.rng), y)
    l_disc = gan_adversarial_losses(pair, real, fake, y).discriminator
    _check_finite("discriminator loss", l_disc, step)
    state.optimizers["discriminator"].zero_grad(set_to_none=True)
    l_disc.backward()
    _check_gradients(pair.discriminator, "discriminator gradient", step)
    state.optimizers["discriminator"].step()

    fake = gan_generate(pair, torch.randn(latent, generator=state.rng), y)
    l_adv = gan_adversarial_losses(pair, real, fake, y).generator
    kp_target, kp_vis = _pose_targets(state, batch)
    pose = pose_supervision_losses(fake, real, extractor, weights, extractor.topology,
                                   kp_target, kp_vis)
    total = composite_gan_objective(l_adv, pose.kp, pose.pose, weights, step)
    state.optimizers["generator"].zero_grad(set_to_none=True)
    total.backward()
    _check_gradients(pair.generator, "generator gradient", step)
    state.optimizers["generator"].step()

    record = StepRecord(
        step=step, epoch=state.epoch, l_main=float(l_adv), l_kp=float(pose.kp),
        l_pose=float(pose.pose), l_total=float(total),
        wall_ms=(time.perf_counter() - start) * 1000, l_disc=float(l_disc),
    )
    state.step = step
    state.run_log.append(record)
    return record


def diffusion_train_step(
    state: TrainingState, batch: PostureBatch, extractor: ColorCodedExtractor
) -> StepRecord:
    """One Adam step on L_recon plus pose terms evaluated on the predicted x0."""
    start = time.perf_counter()
    step = state.step + 1
    config, schedule, unet = state.config, state.schedule, state.unet
    weights = effective_weights(config)
    x0, y = batch.images, batch.labels

    condition = y
    if config.label_dropout > 0:
        drop = torch.rand(y.shape[0], generator=state.rng) < config.label_dropout
        condition = torch.where(drop, torch.full_like(y, state.num_classes), y)
    l_recon, pred = diffusion_recon_loss(unet, x0, y, schedule, state.rng, condition)

    pose = PoseLosses(l_recon.new_zeros(()), l_recon.new_zeros(()))
    if weights.active:
        x0_hat = predict_x0(pred.x_t, pred.eps_pred, pred.t, schedule)
        kp_target, kp_vis = _pose_targets(state, batch)
        pose = pose_supervision_losses(x0_hat, x0, extractor, weights, extractor.topology,
                                       kp_target, kp_vis)
    total = composite_diffusion_objective(l_recon, pose.kp, pose.pose, weights, step)
    state.optimizers["unet"].zero_grad(set_to_none=True)
    total.backward()
    _check_gradients(unet, "unet gradient", step)
    state.optimizers["unet"].step()

    record = StepRecord(
        step=step, epoch=state.epoch, l_main=float(l_recon), l_kp=float(pose.kp),
        l_pose=float(pose.pose), l_total=float(total),
        wall_ms=(time.perf_counter() - start) * 1000,
    )
    state.step = step
    state.run_log.append(record)
    return record


def train_step(
    state: TrainingState, batch: PostureBatch, extractor: ColorCodedExtractor
) -> StepRecord:
    if state.config.is_diffusion:
        return diffusion_train_step(state, batch, extractor)
    return gan_train_step(state, batch, extractor)


# ---------------------------------------------------------------------------
# Sampling from trained models
# ---------------------------------------------------------------------------

@dataclass
class TrainedModel:
    model_kind: str
    config: TrainConfig
    num_classes: int
    network: nn.Module
    schedule: DiffusionSchedule | None = None

    @property
    def image_size(self) -> int:
        return self.config.image_size

    @property
    def is_diffusion(self) -> bool:
        return self.schedule is not None

    def sample(
        self, labels: torch.Tensor, seed: int, guidance_scale: float | None = None
    ) -> torch.Tensor:
        """Images for ``labels``, deterministic in ``seed``; chunked to bound memory."""
        labels = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
        if bool(((labels < 0) | (labels >= self.num_classes)).any()):
            raise ArgumentError(f"labels must lie in [0, {self.num_classes})")
        scale = self.config.guidance_scale if guidance_scale is None else guidance_scale
        chunks = []
        for i, chunk in enumerate(labels.split(SAMPLE_CHUNK)):
            chunk_seed = derive_seed(seed, "sample", i)
            if self.is_diffusion:
                chunks.append(ddpm_sample(self.network, chunk, self.schedule, chunk_seed, scale))
            else:
                chunks.append(self._gan_sample(chunk, chunk_seed))
        if not chunks:
            return torch.empty(0, 3, self.image_size, self.image_size)
        return torch.cat(chunks)

    @torch.no_grad()
    def _gan_sample(self, labels: torch.Tensor, seed: int) -> torch.Tensor:
        generator = self.network
        was_training = generator.training
        generator.eval()
        gen = torch.Generator().manual_seed(seed)
        z = torch.randn((labels.shape[0], generator.latent_dim), generator=gen)
        images = generator(z, labels)
        generator.train(was_training)
        return images


def trained_from_state(state: TrainingState) -> TrainedModel:
    network = state.unet if state.config.is_diffusion else state.networks["generator"]
    return TrainedModel(state.config.model_kind, state.config, state.num_classes,
                        network, state.schedule)


def load_trained(path: str | Path) -> TrainedModel:
    ckpt = load_checkpoint(path)
    try:
        config = TrainConfig.from_dict(ckpt.config)
    except ConfigError as exc:
        raise CheckpointError(f"{path}: stored config is invalid: {exc}") from exc
    if config.model_kind != ckpt.model_kind:
        raise CheckpointError(f"{path}: header kind {ckpt.model_kind} != config kind")
    return trained_from_state(restore_state(ckpt))


# ---------------------------------------------------------------------------
# Loop
# ---------------------------------------------------------------------------

class TrainResult(NamedTuple):
    checkpoint: Path
    run_log: RunLog


def snapshot_keypoint_error(
    state: TrainingState, canonical: CanonicalPoses, extractor: ColorCodedExtractor
) -> EpochSnapshot:
    """Mean keypoint error of a few fresh samples per class against canonical poses."""
    n = state.config.snapshot_samples_per_class
    epoch_losses = [r.l_total for r in state.run_log.steps if r.epoch == state.epoch - 1]
    mean_total = sum(epoch_losses) / len(epoch_losses) if epoch_losses else math.nan
    if n == 0:
        return EpochSnapshot(state.epoch, state.step, math.nan, 0, mean_total)
    labels = torch.arange(state.num_classes).repeat_interleave(n)
    images = trained_from_state(state).sample(labels, derive_seed(state.config.seed, "snapshot"))
    report = mean_keypoint_error(images, labels, extractor, canonical.coords,
                                 canonical.visibility)
    return EpochSnapshot(state.epoch, state.step, report.mean, report.missing, mean_total)


def _save(state: TrainingState, out_dir: Path) -> Path:
    ckpt = state_to_checkpoint(state)
    save_checkpoint(out_dir / "checkpoints" / f"epoch_{state.epoch:04d}.pt", ckpt)
    latest = save_checkpoint(out_dir / "checkpoint.pt", ckpt)
    state.run_log.write_csv(out_dir)
    return latest


def train(
    config: TrainConfig,
    out_dir: str | Path,
    resume_from: str | Path | None = None,
    extractor: ColorCodedExtractor | None = None,
    manifest: DatasetManifest | None = None,
) -> TrainResult:
    """Train ``config.model_kind`` on the manifest's train split.

    Checkpoints land in ``out_dir`` every ``checkpoint_every`` epochs and at the
    end; each is preceded by an epoch snapshot. Resuming restarts at the epoch
    boundary recorded in the checkpoint.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if manifest is None:
        if not config.manifest:
            raise ConfigError("no dataset manifest configured (set 'manifest' or --manifest)")
        manifest = DatasetManifest.load(config.manifest)
    train_split = manifest.subset(Split.TRAIN)
    if not train_split.entries:
        raise ConfigError(f"manifest in {manifest.root} has no train entries")

    extractor = extractor or ColorCodedExtractor()
    canonical = canonical_keypoints(manifest, extractor.topology)
    if resume_from is not None:
        state = restore_state(load_checkpoint(resume_from), config)
        logger.info("resuming %s at epoch %d step %d", config.model_kind, state.epoch, state.step)
    else:
        state = build_state(config, manifest.num_classes)
    if state.num_classes != manifest.num_classes:
        raise CheckpointError(
            f"checkpoint has {state.num_classes} classes, dataset has {manifest.num_classes}"
        )

    latest = out_dir / "checkpoint.pt"
    if state.epoch >= config.epochs:
        return TrainResult(_save(state, out_dir), state.run_log)

    try:
        for epoch in range(state.epoch, config.epochs):
            state.epoch = epoch
            loader = load_dataset(
                train_split, config.batch_size,
                shuffle_seed=derive_seed(config.seed, "epoch", epoch),
                image_dims=config.image_dims,
            )
            for batch in loader:
                record = train_step(state, batch, extractor)
                if record.step % config.log_every == 0:
                    log_event("train_step", model_kind=config.model_kind,
                              **{k: v for k, v in asdict(record).items() if v is not None})
            state.epoch = epoch + 1
            if state.epoch % config.checkpoint_every == 0 or state.epoch == config.epochs:
                snapshot = snapshot_keypoint_error(state, canonical, extractor)
                state.run_log.epochs.append(snapshot)
                log_event("epoch", model_kind=config.model_kind, **asdict(snapshot))
                latest = _save(state, out_dir)
    except KeyboardInterrupt:
        logger.warning("interrupted at epoch %d step %d; resume from %s",
                       state.epoch, state.step, latest)
        raise
    return TrainResult(latest, state.run_log)
