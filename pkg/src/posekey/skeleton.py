"""Skeleton topology, poses, normalization and the pose-supervision losses.

Two layers live here. The batched tensor kernels (``keypoint_distance``,
``relative_feature_tensor``, ``feature_distance``) take ``(..., K, 2)`` tensors
and are differentiable; training calls them directly. The pose-level
operations wrap them with validation and return small result types.
"""

import logging
import math
from dataclasses import dataclass, field
from enum import StrEnum
from typing import NamedTuple

import torch

from posekey.errors import ArgumentError, DegeneratePoseError

logger = logging.getLogger(__name__)

EPS_LEN = 1e-6


class CoordinateSpace(StrEnum):
    PIXEL = "pixel"
    NORMALIZED = "normalized"
    TORSO = "torso"


class NormMode(StrEnum):
    IMAGE = "image"
    TORSO = "torso"


# ---------------------------------------------------------------------------
# Topology
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SkeletonTopology:
    """Joint names, tree bones (parent, child), angle triples and the torso bone."""

    joint_names: tuple[str, ...]
    bones: tuple[tuple[int, int], ...]
    angle_triples: tuple[tuple[int, int, int], ...]
    torso_edge: int

    def __post_init__(self) -> None:
        k = len(self.joint_names)
        if k < 2:
            raise ArgumentError("a skeleton needs at least two joints")
        if len(set(self.joint_names)) != k:
            raise ArgumentError("joint names must be unique")
        seen: set[frozenset[int]] = set()
        for a, b in self.bones:
            if not (0 <= a < k and 0 <= b < k) or a == b:
                raise ArgumentError(f"bone ({a}, {b}) is out of range for {k} joints")
            key = frozenset((a, b))
            if key in seen:
                raise ArgumentError(f"duplicate bone ({a}, {b})")
            seen.add(key)
        if len(self.bones) != k - 1 or not _connected(k, self.bones):
            raise ArgumentError("bones must form a connected tree over all joints")
        if not 0 <= self.torso_edge < len(self.bones):
            raise ArgumentError(f"torso_edge {self.torso_edge} is not a bone index")
        for triple in self.angle_triples:
            if len(set(triple)) != 3 or not all(0 <= j < k for j in triple):
                raise ArgumentError(f"invalid angle triple {triple}")

    @property
    def num_joints(self) -> int:
        return len(self.joint_names)

    @property
    def num_features(self) -> int:
        return len(self.bones) + len(self.angle_triples)

    @property
    def root(self) -> int:
        return self.bones[self.torso_edge][0]

    def index(self, name: str) -> int:
        try:
            return self.joint_names.index(name)
        except ValueError:
            raise ArgumentError(f"unknown joint '{name}'") from None


def _connected(k: int, bones: tuple[tuple[int, int], ...]) -> bool:
    parent = list(range(k))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for a, b in bones:
        ra, rb = find(a), find(b)
        if ra == rb:
            return False
        parent[ra] = rb
    return len({find(i) for i in range(k)}) == 1


_JOINTS = (
    "pelvis", "neck", "head",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_hip", "l_knee", "l_ankle",
    "r_hip", "r_knee", "r_ankle",
)

DEFAULT_TOPOLOGY = SkeletonTopology(
    joint_names=_JOINTS,
    bones=(
        (0, 1),  # torso
        (1, 2),
        (1, 3), (3, 4), (4, 5),
        (1, 6), (6, 7), (7, 8),
        (0, 9), (9, 10), (10, 11),
        (0, 12), (12, 13), (13, 14),
    ),
    angle_triples=(
        (3, 4, 5), (6, 7, 8),        # elbows
        (9, 10, 11), (12, 13, 14),   # knees
        (1, 3, 4), (1, 6, 7),        # shoulders
        (0, 9, 10), (0, 12, 13),     # hips
    ),
    torso_edge=0,
)


# ---------------------------------------------------------------------------
# Pose
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Pose:
    coords: torch.Tensor
    visibility: torch.Tensor
    space: CoordinateSpace = CoordinateSpace.PIXEL

    def __post_init__(self) -> None:
        if self.coords.ndim != 2 or self.coords.shape[1] != 2:
            raise ArgumentError(f"pose coords must be (K, 2), got {tuple(self.coords.shape)}")
        if self.visibility.shape != self.coords.shape[:1]:
            raise ArgumentError("visibility must have one flag per joint")
        if self.visibility.dtype != torch.bool:
            object.__setattr__(self, "visibility", self.visibility.bool())
        if self.space == CoordinateSpace.NORMALIZED and bool(self.visibility.any()):
            vis = self.coords[self.visibility]
            if bool((vis < -1e-9).any()) or bool((vis > 1 + 1e-9).any()):
                raise ArgumentError("visible normalized coordinates must lie in [0, 1]")

    @property
    def num_joints(self) -> int:
        return self.coords.shape[0]

    def to_record(self, image: str) -> dict:
        keypoints = [
            [float(x), float(y), int(v)]
            for (x, y), v in zip(self.coords.tolist(), self.visibility.tolist())
        ]
        return {"image": image, "keypoints": keypoints}

    @classmethod
    def from_record(cls, record: dict, topology: SkeletonTopology = DEFAULT_TOPOLOGY) -> "Pose":
        keypoints = record.get("keypoints")
        if not isinstance(keypoints, list) or len(keypoints) != topology.num_joints:
            raise ArgumentError(
                f"annotation for {record.get('image')!r} must have "
                f"{topology.num_joints} keypoints"
            )
        coords = torch.tensor([[float(k[0]), float(k[1])] for k in keypoints],
                              dtype=torch.float64)
        vis = torch.tensor([bool(k[2]) for k in keypoints])
        return cls(coords, vis, CoordinateSpace.PIXEL)


class NormalizationResult(NamedTuple):
    pose: Pose
    clamped: int


def normalize_keypoints(
    pose: Pose,
    image_dims: tuple[int, int],
    mode: NormMode = NormMode.IMAGE,
    topology: SkeletonTopology = DEFAULT_TOPOLOGY,
) -> NormalizationResult:
    """Map pixel keypoints to [0,1]² (image mode) or torso units (torso mode).

    ``image_dims`` is ``(width, height)``. In image mode visible coordinates
    falling outside the frame are clamped and counted.
    """
    width, height = image_dims
    if width <= 0 or height <= 0:
        raise ArgumentError(f"image dims must be positive, got {image_dims}")
    if pose.space != CoordinateSpace.PIXEL:
        raise ArgumentError(f"expected a pixel-space pose, got {pose.space}")

    if mode == NormMode.TORSO:
        parent, child = topology.bones[topology.torso_edge]
        torso = float(torch.linalg.vector_norm(pose.coords[child] - pose.coords[parent]))
        if torso < EPS_LEN:
            raise DegeneratePoseError("torso length is zero; cannot normalize by torso")
        coords = (pose.coords - pose.coords[topology.root]) / torso
        return NormalizationResult(Pose(coords, pose.visibility, CoordinateSpace.TORSO), 0)

    scale = torch.tensor([width, height], dtype=pose.coords.dtype)
    coords = pose.coords / scale
    outside = ((coords < 0) | (coords > 1)).any(dim=1) & pose.visibility
    clamped = int(outside.sum())
    if clamped:
        logger.warning("clamped %d keypoint(s) outside the image frame", clamped)
        coords = torch.where(pose.visibility[:, None], coords.clamp(0.0, 1.0), coords)
    return NormalizationResult(Pose(coords, pose.visibility, CoordinateSpace.NORMALIZED), clamped)


def denormalize_keypoints(pose: Pose, image_dims: tuple[int, int]) -> Pose:
    width, height = image_dims
    if width <= 0 or height <= 0:
        raise ArgumentError(f"image dims must be positive, got {image_dims}")
    if pose.space != CoordinateSpace.NORMALIZED:
        raise ArgumentError(f"expected a normalized pose, got {pose.space}")
    scale = torch.tensor([width, height], dtype=pose.coords.dtype)
    return Pose(pose.coords * scale, pose.visibility, CoordinateSpace.PIXEL)


def transform_pose(
    pose: Pose,
    translate: tuple[float, float] = (0.0, 0.0),
    rotate: float = 0.0,
    scale: float = 1.0,
    center: tuple[float, float] | None = None,
) -> Pose:
    """Rotate and scale about ``center`` (default: joint mean), then translate.

    The result is always in pixel space; normalized bounds no longer apply.
    """
    coords = pose.coords
    c = (torch.tensor(center, dtype=coords.dtype) if center is not None
         else coords.mean(dim=0))
    cos, sin = math.cos(rotate), math.sin(rotate)
    rot = torch.tensor([[cos, -sin], [sin, cos]], dtype=coords.dtype)
    moved = (coords - c) @ rot.T * scale + c + torch.tensor(translate, dtype=coords.dtype)
    return Pose(moved, pose.visibility.clone(), CoordinateSpace.PIXEL)


# ---------------------------------------------------------------------------
# Keypoint loss
# ---------------------------------------------------------------------------

def keypoint_distance(
    gen: torch.Tensor, gt: torch.Tensor, mask: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Masked mean squared joint distance over ``(..., K, 2)`` tensors.

    Returns ``(loss, count)`` with shape ``(...)``; loss is 0 where count is 0.
    """
    sq = ((gen - gt) ** 2).sum(dim=-1)
    m = mask.to(sq.dtype)
    count = m.sum(dim=-1)
    return (sq * m).sum(dim=-1) / count.clamp_min(1.0), count


class KeypointLoss(NamedTuple):
    value: torch.Tensor
    defined: bool


def keypoint_loss(gen: Pose, gt: Pose, mask: torch.Tensor | None = None) -> KeypointLoss:
    if gen.num_joints != gt.num_joints:
        raise ArgumentError(
            f"topology mismatch: {gen.num_joints} vs {gt.num_joints} joints"
        )
    if gen.space != gt.space:
        raise ArgumentError(f"coordinate space mismatch: {gen.space} vs {gt.space}")
    if mask is None:
        mask = gen.visibility & gt.visibility
    elif mask.shape != gen.visibility.shape:
        raise ArgumentError("mask must have one flag per joint")
    value, count = keypoint_distance(gen.coords, gt.coords, mask.bool())
    return KeypointLoss(value, bool(count > 0))


# ---------------------------------------------------------------------------
# Relative pose features
# ---------------------------------------------------------------------------

def _safe_atan2(y: torch.Tensor, x: torch.Tensor, ok: torch.Tensor) -> torch.Tensor:
    # substitute a harmless input where the angle is undefined so backward stays finite
    y_safe = torch.where(ok, y, torch.zeros_like(y))
    x_safe = torch.where(ok, x, torch.ones_like(x))
    return torch.where(ok, torch.atan2(y_safe, x_safe), torch.zeros_like(y))


def _edge_lengths(vec: torch.Tensor) -> torch.Tensor:
    return torch.sqrt((vec ** 2).sum(dim=-1).clamp_min(EPS_LEN ** 2))


def relative_feature_tensor(
    coords: torch.Tensor,
    topology: SkeletonTopology,
    visibility: torch.Tensor | None = None,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Bone-length ratios then unsigned joint angles for ``(..., K, 2)`` coords.

    Returns ``(values, valid, torso_length)``; values has shape ``(..., N)``
    with the |bones| ratios first.
    """
    if coords.shape[-2] != topology.num_joints:
        raise ArgumentError(
            f"expected {topology.num_joints} joints, got {coords.shape[-2]}"
        )
    if visibility is None:
        visibility = torch.ones(coords.shape[:-1], dtype=torch.bool, device=coords.device)

    parents = torch.tensor([b[0] for b in topology.bones], device=coords.device)
    children = torch.tensor([b[1] for b in topology.bones], device=coords.device)
    raw = coords[..., children, :] - coords[..., parents, :]
    raw_len = torch.sqrt((raw ** 2).sum(dim=-1))
    lengths = _edge_lengths(raw)

    torso = lengths[..., topology.torso_edge]
    torso_ok = (raw_len[..., topology.torso_edge] > EPS_LEN)
    bone_vis = visibility[..., parents] & visibility[..., children]
    torso_ok = torso_ok & bone_vis[..., topology.torso_edge]
    ratios = lengths / torso.clamp_min(EPS_LEN)[..., None]
    ratio_valid = bone_vis & torso_ok[..., None]

    if topology.angle_triples:
        a = torch.tensor([t[0] for t in topology.angle_triples], device=coords.device)
        p = torch.tensor([t[1] for t in topology.angle_triples], device=coords.device)
        b = torch.tensor([t[2] for t in topology.angle_triples], device=coords.device)
        u = coords[..., a, :] - coords[..., p, :]
        v = coords[..., b, :] - coords[..., p, :]
        cross = u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0]
        dot = (u * v).sum(dim=-1)
        arms_ok = ((u ** 2).sum(-1) > EPS_LEN ** 2) & ((v ** 2).sum(-1) > EPS_LEN ** 2)
        angle_valid = arms_ok & visibility[..., a] & visibility[..., p] & visibility[..., b]
        angles = _safe_atan2(cross.abs(), dot, arms_ok)
        if logger.isEnabledFor(logging.DEBUG):
            masked = int((~arms_ok).sum())
            if masked:
                logger.debug("masked %d joint angles with a zero-length arm", masked)
    else:
        angles = coords.new_zeros(coords.shape[:-2] + (0,))
        angle_valid = torch.zeros(angles.shape, dtype=torch.bool, device=coords.device)

    values = torch.cat([ratios, angles], dim=-1)
    valid = torch.cat([ratio_valid, angle_valid], dim=-1)
    return values, valid, torso


@dataclass(frozen=True)
class RelativePoseFeatures:
    bone_length_ratios: torch.Tensor
    joint_angles: torch.Tensor
    ratio_valid: torch.Tensor
    angle_valid: torch.Tensor
    topology: SkeletonTopology = field(default=DEFAULT_TOPOLOGY, compare=False)

    @property
    def values(self) -> torch.Tensor:
        return torch.cat([self.bone_length_ratios, self.joint_angles], dim=-1)

    @property
    def valid(self) -> torch.Tensor:
        return torch.cat([self.ratio_valid, self.angle_valid], dim=-1)


def relative_pose_features(
    pose: Pose, topology: SkeletonTopology = DEFAULT_TOPOLOGY
) -> RelativePoseFeatures:
    """Scale-, rotation- and translation-invariant descriptor of a pose."""
    if pose.num_joints != topology.num_joints:
        raise ArgumentError(
            f"pose has {pose.num_joints} joints, topology expects {topology.num_joints}"
        )
    parent, child = topology.bones[topology.torso_edge]
    if bool(pose.visibility[parent]) and bool(pose.visibility[child]):
        torso = float(torch.linalg.vector_norm(pose.coords[child] - pose.coords[parent]))
        if torso < EPS_LEN:
            raise DegeneratePoseError(
                f"torso bone {topology.joint_names[parent]}->"
                f"{topology.joint_names[child]} has zero length"
            )
    values, valid, _ = relative_feature_tensor(pose.coords, topology, pose.visibility)
    nb = len(topology.bones)
    return RelativePoseFeatures(
        bone_length_ratios=values[:nb],
        joint_angles=values[nb:],
        ratio_valid=valid[:nb],
        angle_valid=valid[nb:],
        topology=topology,
    )


def feature_distance(
    gen: torch.Tensor, gt: torch.Tensor, valid: torch.Tensor
) -> torch.Tensor:
    """Sum of squared feature differences over entries valid on both sides."""
    diff = (gen - gt) ** 2
    return (diff * valid.to(diff.dtype)).sum(dim=-1)


def pose_consistency_loss(
    gen_feats: RelativePoseFeatures, gt_feats: RelativePoseFeatures
) -> torch.Tensor:
    if (gen_feats.bone_length_ratios.shape != gt_feats.bone_length_ratios.shape
            or gen_feats.joint_angles.shape != gt_feats.joint_angles.shape):
        raise ArgumentError("feature layouts differ; poses come from different topologies")
    valid = gen_feats.valid & gt_feats.valid
    return feature_distance(gen_feats.values, gt_feats.values, valid)


# ---------------------------------------------------------------------------
# Loss weights
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LossWeights:
    lambda_kp: float = 1.0
    lambda_pose: float = 1.0

    def __post_init__(self) -> None:
        for name in ("lambda_kp", "lambda_pose"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ArgumentError(f"{name} must be finite and >= 0, got {value}")

    @property
    def active(self) -> bool:
        return self.lambda_kp > 0 or self.lambda_pose > 0
