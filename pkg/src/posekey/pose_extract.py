"""Differentiable pose extraction for color-coded skeleton images.

Every joint j has a palette color c_j. Per-pixel match scores
exp(-|x - c_j|^2 / 2σ^2) are turned into a heatmap by a softmax over pixels at
temperature τ; the joint position is the heatmap's expected pixel coordinate.
"""

from dataclasses import dataclass
from typing import Protocol, runtime_checkable

import torch
import torch.nn.functional as F

from posekey.errors import ArgumentError
from posekey.skeleton import DEFAULT_TOPOLOGY, CoordinateSpace, Pose, SkeletonTopology
from posekey.synth import JOINT_PALETTE

DEFAULT_TEMPERATURE = 0.05
COLOR_SIGMA = 0.1
VISIBILITY_THRESHOLD = 0.5
VISIBILITY_WINDOW = 5


@runtime_checkable
class PoseExtractor(Protocol):
    topology: SkeletonTopology
    differentiable: bool

    def extract(self, image: torch.Tensor) -> Pose: ...


@dataclass(frozen=True)
class Heatmaps:
    """(..., K, H, W) nonnegative maps, each summing to 1 over its pixels."""

    maps: torch.Tensor

    @property
    def num_joints(self) -> int:
        return self.maps.shape[-3]


def _check_image(image: torch.Tensor) -> None:
    if image.ndim < 3 or image.shape[-3] != 3:
        raise ArgumentError(f"expected (..., 3, H, W) images, got {tuple(image.shape)}")


def joint_heatmaps(
    image: torch.Tensor,
    topology: SkeletonTopology = DEFAULT_TOPOLOGY,
    temperature: float = DEFAULT_TEMPERATURE,
    color_sigma: float = COLOR_SIGMA,
    palette: tuple[tuple[float, float, float], ...] = JOINT_PALETTE,
) -> Heatmaps:
    _check_image(image)
    if topology.num_joints > len(palette):
        raise ArgumentError(f"palette only encodes {len(palette)} joints")
    rgb = (image + 1.0) / 2.0
    colors = torch.tensor(palette[: topology.num_joints], dtype=image.dtype,
                          device=image.device)
    # (..., K, H, W) squared color distance
    diff = rgb.unsqueeze(-4) - colors.view(-1, 3, 1, 1)
    score = torch.exp(-(diff ** 2).sum(dim=-3) / (2 * color_sigma ** 2))
    logits = (score / temperature).flatten(start_dim=-2)
    maps = torch.softmax(logits, dim=-1).view(score.shape)
    return Heatmaps(maps)


def _pixel_grid(height: int, width: int, like: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    ys = torch.arange(height, dtype=like.dtype, device=like.device)
    xs = torch.arange(width, dtype=like.dtype, device=like.device)
    return xs, ys


def soft_argmax_coords(
    heatmaps: Heatmaps, visibility_threshold: float = VISIBILITY_THRESHOLD
) -> tuple[torch.Tensor, torch.Tensor]:
    """Expected positions ``(..., K, 2)`` and visibility flags ``(..., K)``."""
    maps = heatmaps.maps
    height, width = maps.shape[-2:]
    xs, ys = _pixel_grid(height, width, maps)
    x = (maps.sum(dim=-2) * xs).sum(dim=-1)
    y = (maps.sum(dim=-1) * ys).sum(dim=-1)
    coords = torch.stack([x, y], dim=-1)

    flat = maps.reshape(-1, 1, height, width)
    pad = VISIBILITY_WINDOW // 2
    window = F.avg_pool2d(flat, VISIBILITY_WINDOW, stride=1, padding=pad,
                          count_include_pad=True) * VISIBILITY_WINDOW ** 2
    peak = window.amax(dim=(-2, -1)).reshape(maps.shape[:-2])
    return coords, peak >= visibility_threshold


def soft_argmax_extract(
    heatmaps: Heatmaps, visibility_threshold: float = VISIBILITY_THRESHOLD
) -> Pose:
    if heatmaps.maps.ndim != 3:
        raise ArgumentError("soft_argmax_extract takes the (K, H, W) maps of one image")
    coords, visible = soft_argmax_coords(heatmaps, visibility_threshold)
    return Pose(coords, visible, CoordinateSpace.PIXEL)


class ColorCodedExtractor:
    """Soft-argmax extractor for images rendered with ``JOINT_PALETTE``."""

    differentiable = True

    def __init__(
        self,
        topology: SkeletonTopology = DEFAULT_TOPOLOGY,
        temperature: float = DEFAULT_TEMPERATURE,
        color_sigma: float = COLOR_SIGMA,
        visibility_threshold: float = VISIBILITY_THRESHOLD,
    ):
        if temperature <= 0 or color_sigma <= 0:
            raise ArgumentError("temperature and color_sigma must be positive")
        self.topology = topology
        self.temperature = temperature
        self.color_sigma = color_sigma
        self.visibility_threshold = visibility_threshold

    def heatmaps(self, images: torch.Tensor) -> Heatmaps:
        return joint_heatmaps(images, self.topology, self.temperature, self.color_sigma)

    def extract_batch(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Pixel coords ``(B, K, 2)`` and visibility ``(B, K)`` for ``(B, 3, H, W)``."""
        return soft_argmax_coords(self.heatmaps(images), self.visibility_threshold)

    def extract(self, image: torch.Tensor) -> Pose:
        _check_image(image)
        if image.ndim != 3:
            raise ArgumentError("extract takes a single (3, H, W) image")
        return soft_argmax_extract(self.heatmaps(image), self.visibility_threshold)
