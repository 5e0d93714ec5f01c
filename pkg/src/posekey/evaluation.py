"""Score checkpoints: FID, MS-SSIM and mean keypoint error, global and per class.

A run evaluation samples ``n_samples`` images per class from a checkpoint and
compares them with a real split of the dataset. The result is a
``MetricReport``; ``MetricReport.write`` emits ``metric_report.json`` and
``per_class_metrics.csv`` for one run, and ``posekey.reporting`` combines
several reports into tables and plots.
"""

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch

from posekey import stats_cache
from posekey.config import config_hash
from posekey.dataset import DatasetManifest, Split, canonical_keypoints, load_class_images
from posekey.errors import ArgumentError, CheckpointError
from posekey.features import FeatureExtractor
from posekey.metrics import (
    GaussianStats,
    fid,
    gaussian_stats,
    mean_keypoint_error,
    ms_ssim_batch,
    usable_scales,
)
from posekey.synth import derive_seed
from posekey.training import TrainedModel, effective_weights, load_trained

logger = logging.getLogger(__name__)

REPORT_FILE = "metric_report.json"
PER_CLASS_FILE = "per_class_metrics.csv"
PER_CLASS_COLUMNS = ("class_id", "fid", "ms_ssim", "mean_kp_err")
MIN_SAMPLES_PER_CLASS = 100
MS_SSIM_SCALES = 5
PAIRING_RULE = "each generated image vs its nearest real exemplar of the same class (L2 pixels)"
SMALL_SAMPLE_CAVEAT = (
    "per-class FID from fewer than {n} samples per class is unstable; "
    "compare such values directionally only"
)


def format_float(value: float) -> str:
    """Fixed six-decimal text for CSV cells; non-finite values become ``nan``."""
    return f"{value:.6f}" if math.isfinite(value) else "nan"


@dataclass
class ClassMetrics:
    class_id: int
    fid: float
    ms_ssim: float
    mean_kp_err: float
    kp_missing: int = 0
    n_generated: int = 0


@dataclass
class MetricReport:
    """Metrics of one model (or of the reference split against itself)."""

    label: str
    model_kind: str
    fid: float
    ms_ssim: float
    mean_kp_err: float
    kp_missing: int
    lambda_kp: float = 0.0
    lambda_pose: float = 0.0
    per_class: list[ClassMetrics] = field(default_factory=list)
    metadata: dict[str, Any] = field(default_factory=dict)

    @property
    def family(self) -> str:
        if self.model_kind.startswith("cgan"):
            return "cgan"
        if self.model_kind.startswith("cdiff"):
            return "cdiff"
        return self.model_kind

    def to_json(self) -> str:
        return json.dumps(_finite_or_none(asdict(self)), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        try:
            data = json.loads(text)
            per_class = [ClassMetrics(**_nan_for_none(c)) for c in data.pop("per_class", [])]
            return cls(**_nan_for_none(data), per_class=per_class)
        except (json.JSONDecodeError, TypeError) as exc:
            raise ArgumentError(f"not a metric report: {exc}") from exc

    @classmethod
    def load(cls, path: str | Path) -> "MetricReport":
        path = Path(path)
        if path.is_dir():
            path = path / REPORT_FILE
        try:
            return cls.from_json(path.read_text())
        except OSError as exc:
            raise ArgumentError(f"cannot read metric report {path}: {exc}") from exc

    def write(self, out_dir: str | Path) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        report_path = out_dir / REPORT_FILE
        report_path.write_text(self.to_json())
        csv_path = out_dir / PER_CLASS_FILE
        with csv_path.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(PER_CLASS_COLUMNS)
            for c in self.per_class:
                writer.writerow([c.class_id, format_float(c.fid), format_float(c.ms_ssim),
                                 format_float(c.mean_kp_err)])
        return report_path, csv_path


# JSON has no NaN; missing metrics travel as null.
def _finite_or_none(value: Any) -> Any:
    if isinstance(value, float):
        return value if math.isfinite(value) else None
    if isinstance(value, dict):
        return {k: _finite_or_none(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_finite_or_none(v) for v in value]
    return value


def _nan_for_none(data: dict[str, Any]) -> dict[str, Any]:
    floats = ("fid", "ms_ssim", "mean_kp_err", "lambda_kp", "lambda_pose")
    return {k: (math.nan if v is None and k in floats else v) for k, v in data.items()}


# ---------------------------------------------------------------------------
# Real-side statistics
# ---------------------------------------------------------------------------

def _real_stats(
    manifest: DatasetManifest,
    split: str,
    class_images: dict[int, torch.Tensor],
    feature_extractor: FeatureExtractor,
) -> tuple[GaussianStats | None, dict[int, GaussianStats | None]]:
    """Global and per-class Gaussian stats of a real split; None where undefined."""
    dataset_hash, extractor_id = manifest.hash(), feature_extractor.identity
    keys: list[int | str] = [*class_images, stats_cache.GLOBAL]
    cached = {k: stats_cache.get(dataset_hash, extractor_id, split, k) for k in keys}
    if all(v is not None for v in cached.values()):
        return cached.pop(stats_cache.GLOBAL), cached

    features = {c: feature_extractor.features(images) for c, images in class_images.items()}
    features[stats_cache.GLOBAL] = np.concatenate(list(features.values()))
    result: dict[int | str, GaussianStats | None] = {}
    for key, feats in features.items():
        if cached[key] is not None:
            result[key] = cached[key]
        elif feats.shape[0] < 2:
            logger.warning("split %s class %s has %d image(s); FID undefined",
                           split, key, feats.shape[0])
            result[key] = None
        else:
            result[key] = gaussian_stats(feats)
            stats_cache.put(dataset_hash, extractor_id, split, key, result[key])
    return result.pop(stats_cache.GLOBAL), result


def _fid_or_nan(real: GaussianStats | None, generated: np.ndarray) -> float:
    if real is None or generated.shape[0] < 2:
        return math.nan
    return fid(real, gaussian_stats(generated))


# ---------------------------------------------------------------------------
# MS-SSIM pairing
# ---------------------------------------------------------------------------

def nearest_exemplars(generated: torch.Tensor, real: torch.Tensor) -> torch.Tensor:
    """For each generated image, the real image with the smallest L2 pixel distance."""
    if real.shape[0] == 0:
        raise ArgumentError("no real exemplars to pair with")
    dist = torch.cdist(generated.flatten(1).double(), real.flatten(1).double())
    return real[dist.argmin(dim=1)]


def _paired_ms_ssim(generated: torch.Tensor, real: torch.Tensor, scales: int) -> torch.Tensor:
    return ms_ssim_batch(generated, nearest_exemplars(generated, real), scales)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def evaluate_images(
    images: torch.Tensor,
    labels: torch.Tensor,
    manifest: DatasetManifest,
    extractor,
    feature_extractor: FeatureExtractor,
    label: str,
    model_kind: str,
    reference_split: str = Split.EVAL,
    metadata: dict[str, Any] | None = None,
) -> MetricReport:
    """Score a labelled image set against ``reference_split`` of ``manifest``."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    if images.ndim != 4 or labels.shape[0] != images.shape[0]:
        raise ArgumentError("need a (N, 3, H, W) batch with one label per image")
    if labels.numel() == 0:
        raise ArgumentError("nothing to evaluate")
    height, width = images.shape[-2:]
    split = Split(reference_split)
    real_images = load_class_images(manifest.subset(split), (width, height))
    missing = sorted(set(labels.tolist()) - set(real_images))
    if missing:
        raise ArgumentError(f"reference split '{split}' has no images for class(es) {missing}")

    scales = usable_scales(height, width, MS_SSIM_SCALES)
    if scales == 0:
        raise ArgumentError(f"images of {width}x{height} are smaller than the SSIM window")
    real_global, real_per_class = _real_stats(manifest, split, real_images, feature_extractor)
    gen_features = feature_extractor.features(images)

    canonical = canonical_keypoints(manifest, extractor.topology)
    kp = mean_keypoint_error(images, labels, extractor, canonical.coords, canonical.visibility)

    per_class, ssim_all = [], torch.zeros(labels.shape[0], dtype=torch.float64)
    for c in sorted(set(labels.tolist())):
        mask = labels == c
        ssim = _paired_ms_ssim(images[mask], real_images[c], scales)
        ssim_all[mask] = ssim
        per_class.append(ClassMetrics(
            class_id=c,
            fid=_fid_or_nan(real_per_class[c], gen_features[mask.numpy()]),
            ms_ssim=float(ssim.mean()),
            mean_kp_err=kp.per_class[c],
            kp_missing=kp.per_class_missing[c],
            n_generated=int(mask.sum()),
        ))

    min_count = min(c.n_generated for c in per_class)
    meta = {
        "dataset_hash": manifest.hash(),
        "reference_split": str(split),
        "feature_extractor": feature_extractor.identity,
        "feature_source": feature_extractor.source,
        "image_size": [width, height],
        "ms_ssim_scales": scales,
        "ms_ssim_pairing": PAIRING_RULE,
        "samples_per_class_min": min_count,
        **(metadata or {}),
    }
    if min_count < MIN_SAMPLES_PER_CLASS:
        meta["small_sample_caveat"] = SMALL_SAMPLE_CAVEAT.format(n=MIN_SAMPLES_PER_CLASS)
        logger.warning("evaluating %s with %d sample(s) per class; FID is unstable below %d",
                       label, min_count, MIN_SAMPLES_PER_CLASS)
    return MetricReport(
        label=label,
        model_kind=model_kind,
        fid=_fid_or_nan(real_global, gen_features),
        ms_ssim=float(ssim_all.mean()),
        mean_kp_err=kp.mean,
        kp_missing=kp.missing,
        per_class=per_class,
        metadata=meta,
    )


def _check_compatible(model: TrainedModel, manifest: DatasetManifest, source: str) -> None:
    if model.num_classes != manifest.num_classes:
        raise CheckpointError(
            f"{source}: model has {model.num_classes} classes, "
            f"dataset has {manifest.num_classes}"
        )


def evaluate_run(
    checkpoint: str | Path | TrainedModel,
    manifest: DatasetManifest,
    extractor,
    n_samples: int,
    feature_extractor: FeatureExtractor,
    seed: int = 0,
    reference_split: str = Split.EVAL,
    label: str | None = None,
) -> MetricReport:
    """Sample ``n_samples`` images per class from a checkpoint and score them."""
    if n_samples < 2:
        raise ArgumentError(f"n_samples must be >= 2 for covariance, got {n_samples}")
    if isinstance(checkpoint, TrainedModel):
        model, source = checkpoint, "model"
    else:
        model, source = load_trained(checkpoint), str(checkpoint)
    _check_compatible(model, manifest, source)

    labels = torch.arange(model.num_classes).repeat_interleave(n_samples)
    images = model.sample(labels, derive_seed(seed, "eval"))
    weights = effective_weights(model.config)
    report = evaluate_images(
        images, labels, manifest, extractor, feature_extractor,
        label=label or model.model_kind,
        model_kind=model.model_kind,
        reference_split=reference_split,
        metadata={
            "config_hash": config_hash(model.config),
            "seed": seed,
            "train_seed": model.config.seed,
            "n_samples_per_class": n_samples,
            "guidance_scale": model.config.guidance_scale,
        },
    )
    report.lambda_kp, report.lambda_pose = weights.lambda_kp, weights.lambda_pose
    return report


def evaluate_reference(
    manifest: DatasetManifest,
    extractor,
    feature_extractor: FeatureExtractor,
    image_size: int,
    split: str = Split.EVAL,
) -> MetricReport:
    """Score a real split against itself; bounds what any model can reach."""
    class_images = load_class_images(manifest.subset(split), (image_size, image_size))
    if not class_images:
        raise ArgumentError(f"split '{split}' is empty")
    images = torch.cat(list(class_images.values()))
    labels = torch.cat([torch.full((len(v),), c, dtype=torch.long)
                        for c, v in class_images.items()])
    return evaluate_images(images, labels, manifest, extractor, feature_extractor,
                           label=f"reference-{split}", model_kind="reference",
                           reference_split=split, metadata={"seed": None})
