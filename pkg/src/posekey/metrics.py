"""Image-quality and pose-fidelity metrics: FID, MS-SSIM, mean keypoint error."""

import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F

from posekey.errors import ArgumentError, DetectorError, NumericError

logger = logging.getLogger(__name__)

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
PSD_TOLERANCE = 1e-6
EXTRACT_CHUNK = 64


# ---------------------------------------------------------------------------
# Fréchet distance
# ---------------------------------------------------------------------------

class GaussianStats(NamedTuple):
    mean: np.ndarray
    cov: np.ndarray


def gaussian_stats(features: np.ndarray | torch.Tensor) -> GaussianStats:
    """Sample mean and unbiased covariance of an (N, F) feature matrix."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2:
        raise ArgumentError(f"features must be (N, F), got shape {feats.shape}")
    if feats.shape[0] < 2:
        raise ArgumentError(f"need at least 2 samples for covariance, got {feats.shape[0]}")
    mean = feats.mean(axis=0)
    centered = feats - mean
    cov = centered.T @ centered / (feats.shape[0] - 1)
    return GaussianStats(mean, cov)


def _symmetric(matrix: np.ndarray) -> np.ndarray:
    return (matrix + matrix.T) / 2.0


def _psd_eigh(matrix: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    vals, vecs = np.linalg.eigh(matrix)
    scale = max(1.0, float(np.abs(vals).max(initial=0.0)))
    if vals.size and vals.min() < -PSD_TOLERANCE * scale:
        raise NumericError(f"{what} is not positive semidefinite (eigenvalue {vals.min():.3g})")
    return np.clip(vals, 0.0, None), vecs


def fid(stats_real: GaussianStats, stats_gen: GaussianStats) -> float:
    """Fréchet distance between two Gaussians.

    Tr((Σ1 Σ2)^½) is computed as Tr((Σ1^½ Σ2 Σ1^½)^½), which keeps every
    intermediate symmetric and avoids complex residue.
    """
    mu1, mu2 = np.asarray(stats_real.mean), np.asarray(stats_gen.mean)
    s1, s2 = _symmetric(np.asarray(stats_real.cov)), _symmetric(np.asarray(stats_gen.cov))
    if mu1.shape != mu2.shape or s1.shape != s2.shape or s1.shape != (mu1.size, mu1.size):
        raise ArgumentError("feature statistics have mismatched dimensions")

    vals1, vecs1 = _psd_eigh(s1, "real covariance")
    _psd_eigh(s2, "generated covariance")
    root1 = (vecs1 * np.sqrt(vals1)) @ vecs1.T
    inner_vals, _ = _psd_eigh(_symmetric(root1 @ s2 @ root1), "covariance product")
    tr_covmean = float(np.sqrt(inner_vals).sum())

    diff = mu1 - mu2
    value = float(diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * tr_covmean)
    return max(value, 0.0)


# ---------------------------------------------------------------------------
# MS-SSIM
# ---------------------------------------------------------------------------

def _gaussian_window(size: int, sigma: float) -> torch.Tensor:
    coords = torch.arange(size, dtype=torch.float64) - size // 2
    g = torch.exp(-(coords ** 2) / (2 * sigma ** 2))
    g = g / g.sum()
    return torch.outer(g, g)


def _ssim_terms(
    x: torch.Tensor, y: torch.Tensor, window: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean SSIM and mean contrast-structure per (batch, channel), valid windows only."""
    channels = x.shape[1]
    kernel = window.expand(channels, 1, *window.shape)

    def blur(t: torch.Tensor) -> torch.Tensor:
        return F.conv2d(t, kernel, groups=channels)

    mu_x, mu_y = blur(x), blur(y)
    sigma_xx = blur(x * x) - mu_x ** 2
    sigma_yy = blur(y * y) - mu_y ** 2
    sigma_xy = blur(x * y) - mu_x * mu_y
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    cs = (2 * sigma_xy + c2) / (sigma_xx + sigma_yy + c2)
    luminance = (2 * mu_x * mu_y + c1) / (mu_x ** 2 + mu_y ** 2 + c1)
    return (luminance * cs).mean(dim=(-2, -1)), cs.mean(dim=(-2, -1))


def usable_scales(height: int, width: int, scales: int, window: int = SSIM_WINDOW) -> int:
    usable = scales
    while usable > 0 and min(height, width) < 2 ** (usable - 1) * window:
        usable -= 1
    return usable


def ms_ssim_batch(
    a: torch.Tensor,
    b: torch.Tensor,
    scales: int = 5,
    weights: tuple[float, ...] = MS_SSIM_WEIGHTS,
) -> torch.Tensor:
    """MS-SSIM per image pair for (B, C, H, W) images in [-1, 1]."""
    if a.shape != b.shape or a.ndim != 4:
        raise ArgumentError(f"image shapes differ or are not batched: "
                            f"{tuple(a.shape)} vs {tuple(b.shape)}")
    if not 1 <= scales <= len(weights):
        raise ArgumentError(f"scales must be in [1, {len(weights)}]")
    height, width = a.shape[-2:]
    usable = usable_scales(height, width, scales)
    if usable == 0:
        raise ArgumentError(f"images of {width}x{height} are smaller than the SSIM window")
    if usable < scales:
        logger.warning("MS-SSIM reduced from %d to %d scales for %dx%d images",
                       scales, usable, width, height)
    w = torch.tensor(weights[:usable], dtype=torch.float64)
    w = w / w.sum()

    x = (a.detach().to(torch.float64) + 1.0) / 2.0
    y = (b.detach().to(torch.float64) + 1.0) / 2.0
    window = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    levels = []
    for level in range(usable):
        ssim, cs = _ssim_terms(x, y, window)
        if level < usable - 1:
            levels.append(torch.relu(cs))
            x, y = F.avg_pool2d(x, 2), F.avg_pool2d(y, 2)
    levels.append(torch.relu(ssim))
    stacked = torch.stack(levels)  # (S, B, C)
    per_channel = torch.prod(stacked ** w.view(-1, 1, 1), dim=0)
    return per_channel.mean(dim=-1)


def ms_ssim(a: torch.Tensor, b: torch.Tensor, scales: int = 5) -> float:
    if a.shape != b.shape:
        raise ArgumentError(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.ndim == 3:
        a, b = a.unsqueeze(0), b.unsqueeze(0)
    return float(ms_ssim_batch(a, b, scales).mean())


# ---------------------------------------------------------------------------
# Keypoint error
# ---------------------------------------------------------------------------

@dataclass
class KeypointErrorReport:
    """Mean per-joint pixel error; samples without any matched joint are missing."""

    mean: float
    per_class: dict[int, float] = field(default_factory=dict)
    missing: int = 0
    per_class_missing: dict[int, int] = field(default_factory=dict)
    count: int = 0


def _extract_all(images: torch.Tensor, extractor) -> tuple[torch.Tensor, torch.Tensor]:
    if hasattr(extractor, "extract_batch"):
        coords, vis = [], []
        with torch.no_grad():
            for chunk in images.split(EXTRACT_CHUNK):
                c, v = extractor.extract_batch(chunk)
                coords.append(c.to(torch.float64))
                vis.append(v)
        return torch.cat(coords), torch.cat(vis)

    k = extractor.topology.num_joints
    coords = torch.zeros(images.shape[0], k, 2, dtype=torch.float64)
    vis = torch.zeros(images.shape[0], k, dtype=torch.bool)
    for i, image in enumerate(images):
        try:
            pose = extractor.extract(image)
        except DetectorError as exc:
            logger.warning("pose extraction failed for sample %d: %s", i, exc)
            continue
        coords[i], vis[i] = pose.coords.to(torch.float64), pose.visibility
    return coords, vis


def mean_keypoint_error(
    images: torch.Tensor,
    labels: torch.Tensor,
    extractor,
    canonical_coords: torch.Tensor,
    canonical_visibility: torch.Tensor | None = None,
) -> KeypointErrorReport:
    """Mean Euclidean pixel distance to each sample's canonical class pose.

    ``canonical_coords`` is (C, K, 2) in normalized units and is scaled to the
    image size before comparison.
    """
    if canonical_coords.ndim != 3 or canonical_coords.shape[1] != extractor.topology.num_joints:
        raise ArgumentError("canonical poses do not match the extractor topology")
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.shape[0] != images.shape[0]:
        raise ArgumentError("need exactly one label per image")
    if canonical_visibility is None:
        canonical_visibility = torch.ones(canonical_coords.shape[:2], dtype=torch.bool)

    height, width = images.shape[-2:]
    scale = torch.tensor([width, height], dtype=torch.float64)
    coords, vis = _extract_all(images, extractor)
    target = canonical_coords.to(torch.float64)[labels] * scale
    mask = vis & canonical_visibility[labels]
    dist = torch.linalg.vector_norm(coords - target, dim=-1)
    count = mask.sum(dim=-1)
    per_sample = (dist * mask).sum(dim=-1) / count.clamp_min(1)
    found = count > 0

    report = KeypointErrorReport(
        mean=float(per_sample[found].mean()) if bool(found.any()) else math.nan,
        missing=int((~found).sum()),
        count=int(labels.shape[0]),
    )
    for c in sorted(set(labels.tolist())):
        in_class = labels == c
        ok = in_class & found
        report.per_class[c] = float(per_sample[ok].mean()) if bool(ok.any()) else math.nan
        report.per_class_missing[c] = int((in_class & ~found).sum())
    return report
