"""Synthetic codified-posture bank and renderer.

Each keyposture class is a canonical skeleton configuration. Rendering draws
anti-aliased gray bones on black and one colored disc per joint; the disc
color identifies the joint, which is the signal the differentiable pose
extractor keys on.
"""

import hashlib
import logging
import math
from collections import deque
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
import torch

from posekey.errors import ArgumentError, GenerationError
from posekey.skeleton import (
    DEFAULT_TOPOLOGY,
    CoordinateSpace,
    Pose,
    SkeletonTopology,
    feature_distance,
    keypoint_distance,
    relative_feature_tensor,
)

logger = logging.getLogger(__name__)

BANK_MARGIN = 0.05
MIN_JOINT_SEPARATION = 0.07
MIN_FEATURE_SEPARATION = 0.25
MIN_KEYPOINT_SEPARATION = 0.004
MAX_BANK_ATTEMPTS = 1000
MAX_RENDER_RESAMPLES = 10
MIN_RENDER_SIDE = 32

BACKGROUND_COLOR = (0.0, 0.0, 0.0)
BONE_COLOR = (0.5, 0.5, 0.5)

# Colors on the {0, 0.5, 1}^3 grid, excluding black, gray and anything a
# joint color fades into when blended toward the background or a bone.
JOINT_PALETTE: tuple[tuple[float, float, float], ...] = (
    (1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0),
    (1.0, 1.0, 0.0), (1.0, 0.0, 1.0), (0.0, 1.0, 1.0), (1.0, 1.0, 1.0),
    (1.0, 0.5, 0.0), (1.0, 0.0, 0.5), (0.5, 1.0, 0.0), (0.0, 1.0, 0.5),
    (0.5, 0.0, 1.0), (0.0, 0.5, 1.0), (1.0, 0.5, 0.5), (0.5, 1.0, 0.5),
    (0.5, 0.5, 1.0), (1.0, 1.0, 0.5), (1.0, 0.5, 1.0), (0.5, 1.0, 1.0),
)

# canonical bone lengths for DEFAULT_TOPOLOGY, in image-width units
_BONE_LENGTHS = (
    0.24,               # pelvis -> neck
    0.09,               # neck -> head
    0.08, 0.12, 0.11,   # left arm
    0.08, 0.12, 0.11,   # right arm
    0.08, 0.15, 0.14,   # left leg
    0.08, 0.15, 0.14,   # right leg
)


def derive_seed(*parts: object) -> int:
    """Stable 63-bit seed from arbitrary parts, independent of call order."""
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1


@dataclass(frozen=True)
class PostureSpec:
    class_id: int
    name: str
    canonical_angles: tuple[float, ...]
    bone_lengths: tuple[float, ...]
    root_position: tuple[float, float]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "PostureSpec":
        return cls(
            class_id=int(data["class_id"]),
            name=str(data["name"]),
            canonical_angles=tuple(float(a) for a in data["canonical_angles"]),
            bone_lengths=tuple(float(b) for b in data["bone_lengths"]),
            root_position=(float(data["root_position"][0]), float(data["root_position"][1])),
        )


# ---------------------------------------------------------------------------
# Forward kinematics
# ---------------------------------------------------------------------------

def _bone_order(topology: SkeletonTopology) -> list[tuple[int, int | None]]:
    """Bones in root-first order, each paired with the index of its parent bone."""
    by_parent: dict[int, list[int]] = {}
    for idx, (parent, _) in enumerate(topology.bones):
        by_parent.setdefault(parent, []).append(idx)
    order: list[tuple[int, int | None]] = []
    queue: deque[tuple[int, int | None]] = deque(
        (b, None) for b in by_parent.get(topology.root, [])
    )
    while queue:
        bone, up = queue.popleft()
        order.append((bone, up))
        child = topology.bones[bone][1]
        queue.extend((b, bone) for b in by_parent.get(child, []))
    if len(order) != len(topology.bones):
        raise ArgumentError("bones must be directed away from the torso root")
    return order


def forward_kinematics(
    spec: PostureSpec,
    topology: SkeletonTopology = DEFAULT_TOPOLOGY,
    joint_jitter: np.ndarray | None = None,
) -> np.ndarray:
    """Normalized (K, 2) joint positions for ``spec``.

    ``joint_jitter`` holds one rotation per bone, applied at the bone's parent
    joint and carried down to every descendant bone.
    """
    n_bones = len(topology.bones)
    if len(spec.canonical_angles) != n_bones or len(spec.bone_lengths) != n_bones:
        raise ArgumentError(f"posture '{spec.name}' does not match a {n_bones}-bone topology")
    jitter = np.zeros(n_bones) if joint_jitter is None else np.asarray(joint_jitter, float)

    coords = np.zeros((topology.num_joints, 2))
    coords[topology.root] = spec.root_position
    carried = np.zeros(n_bones)
    for bone, up in _bone_order(topology):
        carried[bone] = jitter[bone] + (carried[up] if up is not None else 0.0)
        theta = spec.canonical_angles[bone] + carried[bone]
        parent, child = topology.bones[bone]
        length = spec.bone_lengths[bone]
        coords[child] = coords[parent] + length * np.array([math.cos(theta), math.sin(theta)])
    return coords


def predicted_keypoint_std(
    spec: PostureSpec,
    jitter_std: float,
    dims: tuple[int, int],
    topology: SkeletonTopology = DEFAULT_TOPOLOGY,
) -> np.ndarray:
    """First-order per-joint positional std (pixels) under angle jitter."""
    width, height = dims
    coords = forward_kinematics(spec, topology)
    parent_bone = {bone: up for bone, up in _bone_order(topology)}
    into_joint = {child: idx for idx, (_, child) in enumerate(topology.bones)}

    var = np.zeros(topology.num_joints)
    for joint in range(topology.num_joints):
        bone = into_joint.get(joint)
        while bone is not None:
            d = coords[joint] - coords[topology.bones[bone][0]]
            var[joint] += (d[1] * width) ** 2 + (d[0] * height) ** 2
            bone = parent_bone[bone]
    return jitter_std * np.sqrt(var)


# ---------------------------------------------------------------------------
# Posture bank
# ---------------------------------------------------------------------------

def _mirror(theta: float) -> float:
    return math.pi - theta


def _sample_limbs(rng: np.random.Generator) -> tuple[float, float, float, float]:
    """Left-side arm and leg orientations (upper arm, forearm, thigh, shin)."""
    upper = rng.uniform(math.pi / 2 + 0.3, 3 * math.pi / 2 + 0.5)
    fore = upper + rng.uniform(-2.3, 2.3)
    thigh = rng.uniform(math.pi / 2, math.pi / 2 + 0.9)
    shin = thigh + rng.uniform(-0.9, 0.5)
    return upper, fore, thigh, shin


def _sample_angles(rng: np.random.Generator, symmetric: bool) -> tuple[float, ...]:
    torso = -math.pi / 2 + (0.0 if symmetric else rng.uniform(-0.3, 0.3))
    head = torso + (0.0 if symmetric else rng.uniform(-0.3, 0.3))
    l_upper, l_fore, l_thigh, l_shin = _sample_limbs(rng)
    if symmetric:
        r_upper, r_fore, r_thigh, r_shin = (
            _mirror(l_upper), _mirror(l_fore), _mirror(l_thigh), _mirror(l_shin)
        )
    else:
        r_upper, r_fore, r_thigh, r_shin = (_mirror(a) for a in _sample_limbs(rng))
    return (
        torso, head,
        torso - math.pi / 2 - 0.2, l_upper, l_fore,
        torso + math.pi / 2 + 0.2, r_upper, r_fore,
        torso + 3 * math.pi / 2 - 0.6, l_thigh, l_shin,
        torso + math.pi / 2 + 0.6, r_thigh, r_shin,
    )


def _centered(angles: tuple[float, ...], class_id: int, name: str) -> PostureSpec | None:
    draft = PostureSpec(class_id, name, angles, _BONE_LENGTHS, (0.0, 0.0))
    coords = forward_kinematics(draft)
    lo, hi = coords.min(axis=0), coords.max(axis=0)
    if np.any(hi - lo > 1 - 2 * BANK_MARGIN):
        return None
    root = 0.5 - (lo + hi) / 2
    return PostureSpec(class_id, name, angles, _BONE_LENGTHS, (float(root[0]), float(root[1])))


def _min_joint_gap(coords: np.ndarray) -> float:
    diff = coords[:, None, :] - coords[None, :, :]
    dist = np.sqrt((diff ** 2).sum(-1))
    return float(dist[np.triu_indices(len(coords), k=1)].min())


def make_posture_bank(
    num_classes: int,
    seed: int,
    topology: SkeletonTopology = DEFAULT_TOPOLOGY,
    min_separation: float = MIN_FEATURE_SEPARATION,
) -> list[PostureSpec]:
    """Draw ``num_classes`` feature-separated canonical postures.

    Even class ids are bilaterally symmetric, odd ones asymmetric.
    """
    if num_classes < 2:
        raise ArgumentError(f"a posture bank needs at least 2 classes, got {num_classes}")
    if topology != DEFAULT_TOPOLOGY:
        raise ArgumentError("posture banks are defined for the default 15-joint skeleton")

    rng = np.random.default_rng(seed)
    bank: list[PostureSpec] = []
    accepted: list[torch.Tensor] = []
    for class_id in range(num_classes):
        symmetric = class_id % 2 == 0
        name = f"kp{class_id:02d}-{'sym' if symmetric else 'asym'}"
        for _ in range(MAX_BANK_ATTEMPTS):
            spec = _centered(_sample_angles(rng, symmetric), class_id, name)
            if spec is None:
                continue
            coords = forward_kinematics(spec, topology)
            if _min_joint_gap(coords) < MIN_JOINT_SEPARATION:
                continue
            candidate = torch.from_numpy(coords)
            if all(_separated(candidate, other, topology, min_separation) for other in accepted):
                bank.append(spec)
                accepted.append(candidate)
                break
        else:
            raise GenerationError(
                f"could not place class {class_id} after {MAX_BANK_ATTEMPTS} attempts "
                f"(separation {min_separation})"
            )
    return bank


def _separated(
    a: torch.Tensor, b: torch.Tensor, topology: SkeletonTopology, min_separation: float
) -> bool:
    fa, va, _ = relative_feature_tensor(a, topology)
    fb, vb, _ = relative_feature_tensor(b, topology)
    if float(feature_distance(fa, fb, va & vb)) < min_separation:
        return False
    mask = torch.ones(topology.num_joints, dtype=torch.bool)
    kp, _ = keypoint_distance(a, b, mask)
    return float(kp) >= MIN_KEYPOINT_SEPARATION


def canonical_pose(
    spec: PostureSpec, dims: tuple[int, int], topology: SkeletonTopology = DEFAULT_TOPOLOGY
) -> Pose:
    coords = forward_kinematics(spec, topology) * np.array(dims, dtype=float)
    return Pose(
        torch.from_numpy(coords),
        torch.ones(topology.num_joints, dtype=torch.bool),
        CoordinateSpace.PIXEL,
    )


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

class RenderResult(NamedTuple):
    pixels: np.ndarray  # (H, W, 3) uint8
    pose: Pose
    clamped: bool

    @property
    def image(self) -> torch.Tensor:
        return pixels_to_tensor(self.pixels)


def pixels_to_tensor(pixels: np.ndarray) -> torch.Tensor:
    """uint8 (H, W, 3) -> float32 (3, H, W) in [-1, 1]."""
    return torch.from_numpy(pixels.astype(np.float32) / 127.5 - 1.0).permute(2, 0, 1).contiguous()


def tensor_to_pixels(image: torch.Tensor) -> np.ndarray:
    """float (3, H, W) in [-1, 1] -> uint8 (H, W, 3)."""
    scaled = ((image.detach().clamp(-1, 1) + 1) * 127.5).round().to(torch.uint8)
    return scaled.permute(1, 2, 0).cpu().numpy()


def disc_radius(width: int) -> float:
    return max(1.5, 0.02 * width)


def bone_half_width(width: int) -> float:
    return max(0.75, 0.008 * width)


def _segment_distance(xx, yy, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return np.hypot(xx - a[0], yy - a[1])
    t = np.clip(((xx - a[0]) * ab[0] + (yy - a[1]) * ab[1]) / denom, 0.0, 1.0)
    return np.hypot(xx - (a[0] + t * ab[0]), yy - (a[1] + t * ab[1]))


def _paint(canvas: np.ndarray, coverage: np.ndarray, color) -> None:
    cov = coverage[..., None]
    canvas *= 1.0 - cov
    canvas += cov * np.asarray(color)


def draw_skeleton(
    coords: np.ndarray, dims: tuple[int, int], topology: SkeletonTopology = DEFAULT_TOPOLOGY
) -> np.ndarray:
    """Rasterize pixel-space joints into an (H, W, 3) uint8 image.

    Pixel (r, c) has its center at x=c, y=r.
    """
    if topology.num_joints > len(JOINT_PALETTE):
        raise ArgumentError(f"palette only encodes {len(JOINT_PALETTE)} joints")
    width, height = dims
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    canvas = np.zeros((height, width, 3))
    canvas[:] = BACKGROUND_COLOR

    half = bone_half_width(width)
    for parent, child in topology.bones:
        dist = _segment_distance(xx, yy, coords[parent], coords[child])
        _paint(canvas, np.clip(half + 0.5 - dist, 0.0, 1.0), BONE_COLOR)

    radius = disc_radius(width)
    for joint in range(topology.num_joints):
        dist = np.hypot(xx - coords[joint, 0], yy - coords[joint, 1])
        _paint(canvas, np.clip(radius + 0.5 - dist, 0.0, 1.0), JOINT_PALETTE[joint])

    return np.round(np.clip(canvas, 0.0, 1.0) * 255.0).astype(np.uint8)


def render_posture(
    spec: PostureSpec,
    jitter_std: float,
    seed: int,
    dims: tuple[int, int],
    topology: SkeletonTopology = DEFAULT_TOPOLOGY,
) -> RenderResult:
    width, height = dims
    if width < MIN_RENDER_SIDE or height < MIN_RENDER_SIDE:
        raise ArgumentError(f"render dims must be at least {MIN_RENDER_SIDE}x{MIN_RENDER_SIDE}")
    if not math.isfinite(jitter_std) or jitter_std < 0:
        raise ArgumentError(f"jitter_std must be >= 0, got {jitter_std}")

    rng = np.random.default_rng(seed)
    scale = np.array([width, height], dtype=float)
    lo, hi = np.zeros(2), scale - 1.0
    n_bones = len(topology.bones)

    clamped = False
    for _ in range(MAX_RENDER_RESAMPLES + 1):
        jitter = rng.normal(0.0, jitter_std, n_bones) if jitter_std > 0 else np.zeros(n_bones)
        coords = forward_kinematics(spec, topology, jitter) * scale
        if np.all(coords >= lo) and np.all(coords <= hi):
            break
    else:
        clamped = True
        coords = np.clip(coords, 0.0, scale - 1.0)
        logger.warning(
            "posture '%s' seed %d left the frame after %d resamples; clamped",
            spec.name, seed, MAX_RENDER_RESAMPLES,
        )

    pixels = draw_skeleton(coords, dims, topology)
    pose = Pose(
        torch.from_numpy(coords),
        torch.ones(topology.num_joints, dtype=torch.bool),
        CoordinateSpace.PIXEL,
    )
    return RenderResult(pixels, pose, clamped)
