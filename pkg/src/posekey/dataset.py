"""Dataset manifests: synthetic generation, real-folder ingestion and loading.

On-disk layout (shared by generated and ingested datasets)::

    manifest.csv   image_path,class_id,split
    poses.jsonl    {"image": <image_path>, "keypoints": [[x, y, v], ...]}
    dataset.json   metadata; the posture bank for synthetic data
    images/        lossless 8-bit RGB PNGs (synthetic only)
"""

import csv
import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import StrEnum
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np
import torch
from PIL import Image
from torch.utils.data import DataLoader, Dataset

from posekey.errors import ArgumentError, DatasetError
from posekey.skeleton import DEFAULT_TOPOLOGY, CoordinateSpace, Pose, SkeletonTopology
from posekey.synth import (
    PostureSpec,
    derive_seed,
    forward_kinematics,
    pixels_to_tensor,
    render_posture,
)

logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.csv"
POSES_FILE = "poses.jsonl"
METADATA_FILE = "dataset.json"
MANIFEST_COLUMNS = ("image_path", "class_id", "split")


class Split(StrEnum):
    TRAIN = "train"
    EVAL = "eval"


@dataclass(frozen=True)
class ManifestEntry:
    image_path: str
    class_id: int
    split: Split


@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    entries: tuple[ManifestEntry, ...]
    poses_path: Path
    num_classes: int
    split: Split | None = None
    metadata: dict = field(default_factory=dict, compare=False, repr=False)

    @classmethod
    def load(cls, path: str | Path, validate: bool = True) -> "DatasetManifest":
        """Read ``manifest.csv`` (or the directory holding it)."""
        path = Path(path)
        manifest_file = path / MANIFEST_FILE if path.is_dir() else path
        root = manifest_file.parent
        try:
            with manifest_file.open(newline="") as fh:
                rows = list(csv.DictReader(fh))
        except OSError as exc:
            raise DatasetError(f"cannot read manifest {manifest_file}: {exc}") from exc

        entries = []
        for line_no, row in enumerate(rows, start=2):
            try:
                entries.append(ManifestEntry(
                    image_path=row["image_path"],
                    class_id=int(row["class_id"]),
                    split=Split(row["split"]),
                ))
            except (KeyError, TypeError, ValueError) as exc:
                raise DatasetError(f"{manifest_file}:{line_no}: malformed row {row}") from exc

        metadata = _read_metadata(root)
        num_classes = int(metadata.get("num_classes", 0)) or (
            max((e.class_id for e in entries), default=-1) + 1
        )
        manifest = cls(root, tuple(entries), root / POSES_FILE, num_classes, None, metadata)
        if validate:
            manifest.validate()
        return manifest

    def validate(self, topology: SkeletonTopology = DEFAULT_TOPOLOGY) -> None:
        for entry in self.entries:
            if not 0 <= entry.class_id < self.num_classes:
                raise DatasetError(
                    f"entry {entry.image_path}: class {entry.class_id} "
                    f"outside [0, {self.num_classes})"
                )
            if not self.image_file(entry).is_file():
                raise DatasetError(f"entry {entry.image_path}: image file is missing")
        poses = self.load_poses(topology)
        for entry in self.entries:
            if entry.image_path not in poses:
                raise DatasetError(f"entry {entry.image_path}: no pose annotation")

    def image_file(self, entry: ManifestEntry) -> Path:
        p = Path(entry.image_path)
        return p if p.is_absolute() else self.root / p

    def subset(self, split: Split | str) -> "DatasetManifest":
        split = Split(split)
        kept = tuple(e for e in self.entries if e.split == split)
        return replace(self, entries=kept, split=split)

    def by_class(self) -> dict[int, list[ManifestEntry]]:
        groups: dict[int, list[ManifestEntry]] = {c: [] for c in range(self.num_classes)}
        for entry in self.entries:
            groups[entry.class_id].append(entry)
        return groups

    def hash(self) -> str:
        """sha256 of manifest.csv; identifies the dataset in caches and reports."""
        try:
            return hashlib.sha256((self.root / MANIFEST_FILE).read_bytes()).hexdigest()
        except OSError as exc:
            raise DatasetError(f"cannot hash manifest in {self.root}: {exc}") from exc

    def load_poses(self, topology: SkeletonTopology = DEFAULT_TOPOLOGY) -> dict[str, Pose]:
        poses: dict[str, Pose] = {}
        try:
            lines = self.poses_path.read_text().splitlines()
        except OSError as exc:
            raise DatasetError(f"cannot read annotations {self.poses_path}: {exc}") from exc
        for line_no, line in enumerate(lines, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                pose = Pose.from_record(record, topology)
            except (json.JSONDecodeError, ArgumentError, KeyError, TypeError) as exc:
                raise DatasetError(f"{self.poses_path}:{line_no}: {exc}") from exc
            if record["image"] in poses:
                raise DatasetError(
                    f"{self.poses_path}:{line_no}: duplicate annotation for {record['image']}"
                )
            poses[record["image"]] = pose
        return poses

    @property
    def bank(self) -> list[PostureSpec] | None:
        specs = self.metadata.get("bank")
        return [PostureSpec.from_dict(s) for s in specs] if specs else None


def _read_metadata(root: Path) -> dict:
    path = root / METADATA_FILE
    if not path.is_file():
        return {}
    try:
        return json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"cannot read dataset metadata {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Writing
# ---------------------------------------------------------------------------

def _eval_count(per_class: int) -> int:
    if per_class >= 10:
        return per_class // 10
    return 1 if per_class >= 2 else 0


def _stratified_splits(counts: dict[int, int], seed: int) -> dict[tuple[int, int], Split]:
    """90/10 split per class, keyed by (class_id, index within class)."""
    splits = {}
    for class_id, n in counts.items():
        order = np.random.default_rng(derive_seed(seed, "split", class_id)).permutation(n)
        held_out = set(order[: _eval_count(n)].tolist())
        for k in range(n):
            splits[(class_id, k)] = Split.EVAL if k in held_out else Split.TRAIN
    return splits


def _write_tables(out_dir: Path, entries: list[ManifestEntry], records: list[dict],
                  metadata: dict) -> None:
    try:
        with (out_dir / MANIFEST_FILE).open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(MANIFEST_COLUMNS)
            for e in entries:
                writer.writerow([e.image_path, e.class_id, e.split.value])
        with (out_dir / POSES_FILE).open("w") as fh:
            for record in records:
                fh.write(json.dumps(record, separators=(",", ":")) + "\n")
        (out_dir / METADATA_FILE).write_text(json.dumps(metadata, indent=2, sort_keys=True))
    except OSError as exc:
        raise DatasetError(f"cannot write dataset tables in {out_dir}: {exc}") from exc


def generate_dataset(
    bank: list[PostureSpec],
    per_class: int,
    jitter_std: float,
    dims: tuple[int, int],
    out_dir: str | Path,
    seed: int,
    topology: SkeletonTopology = DEFAULT_TOPOLOGY,
    workers: int = 1,
) -> DatasetManifest:
    """Render ``len(bank) * per_class`` images plus manifest and annotations.

    Output depends only on the arguments: per-sample seeds are derived from
    ``(seed, sample_index)``, so worker count and scheduling do not matter.
    """
    if per_class < 1:
        raise ArgumentError(f"per_class must be >= 1, got {per_class}")
    if len(bank) < 2:
        raise ArgumentError("a dataset needs at least two posture classes")
    out_dir = Path(out_dir)
    try:
        for spec in bank:
            (out_dir / "images" / f"{spec.class_id:02d}").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot create dataset directory {out_dir}: {exc}") from exc

    splits = _stratified_splits({spec.class_id: per_class for spec in bank}, seed)
    tasks = [
        (spec, k, i * per_class + k) for i, spec in enumerate(bank) for k in range(per_class)
    ]

    def _render_one(task: tuple[PostureSpec, int, int]) -> tuple[ManifestEntry, dict]:
        spec, k, index = task
        result = render_posture(spec, jitter_std, derive_seed(seed, index), dims, topology)
        rel = f"images/{spec.class_id:02d}/{k:05d}.png"
        path = out_dir / rel
        try:
            Image.fromarray(result.pixels).save(path, format="PNG")
        except OSError as exc:
            raise DatasetError(f"cannot write image {path}: {exc}") from exc
        entry = ManifestEntry(rel, spec.class_id, splits[(spec.class_id, k)])
        return entry, result.pose.to_record(rel)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rendered = list(pool.map(_render_one, tasks))
    else:
        rendered = [_render_one(t) for t in tasks]

    metadata = {
        "num_classes": len(bank),
        "per_class": per_class,
        "jitter_std": jitter_std,
        "dims": list(dims),
        "seed": seed,
        "joint_names": list(topology.joint_names),
        "bank": [spec.to_dict() for spec in bank],
    }
    _write_tables(out_dir, [r[0] for r in rendered], [r[1] for r in rendered], metadata)
    logger.info("wrote %d images for %d classes to %s", len(rendered), len(bank), out_dir)
    return DatasetManifest.load(out_dir)


def ingest_folder(
    src: str | Path,
    out_dir: str | Path,
    topology: SkeletonTopology = DEFAULT_TOPOLOGY,
    seed: int = 0,
) -> DatasetManifest:
    """Adopt a user-annotated image folder laid out like a generated dataset.

    The ``split`` column is optional; when absent a stratified 90/10 split is
    assigned. Image paths are written absolute so ``out_dir`` may live anywhere.
    """
    src = Path(src).resolve()
    try:
        with (src / MANIFEST_FILE).open(newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise DatasetError(f"cannot read manifest in {src}: {exc}") from exc
    if not rows:
        raise DatasetError(f"{src / MANIFEST_FILE} has no entries")

    source = DatasetManifest(src, (), src / POSES_FILE, 0)
    poses = source.load_poses(topology)

    counts: dict[int, int] = {}
    parsed = []
    for line_no, row in enumerate(rows, start=2):
        try:
            class_id = int(row["class_id"])
            image = row["image_path"]
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"{src / MANIFEST_FILE}:{line_no}: malformed row") from exc
        if class_id < 0:
            raise DatasetError(f"entry {image}: negative class id")
        if image not in poses:
            raise DatasetError(f"entry {image}: no pose annotation")
        if not (src / image).is_file():
            raise DatasetError(f"entry {image}: image file is missing")
        split = (row.get("split") or "").strip()
        if split and split not in Split.__members__.values():
            raise DatasetError(f"entry {image}: unknown split '{split}'")
        parsed.append((image, class_id, counts.get(class_id, 0), split))
        counts[class_id] = counts.get(class_id, 0) + 1

    num_classes = max(counts) + 1
    assigned = _stratified_splits(counts, seed)
    entries, records = [], []
    for image, class_id, k, split in parsed:
        absolute = str(src / image)
        entries.append(ManifestEntry(absolute, class_id, Split(split) if split else
                                     assigned[(class_id, k)]))
        records.append(poses[image].to_record(absolute))

    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot create {out_dir}: {exc}") from exc
    metadata = {
        "num_classes": num_classes,
        "source": str(src),
        "seed": seed,
        "joint_names": list(topology.joint_names),
    }
    _write_tables(out_dir, entries, records, metadata)
    logger.info("ingested %d annotated images from %s", len(entries), src)
    return DatasetManifest.load(out_dir)


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------

class PostureSample(NamedTuple):
    image: torch.Tensor       # (3, H, W) in [-1, 1]
    class_id: int
    keypoints: torch.Tensor   # (K, 2) pixels
    visibility: torch.Tensor  # (K,) bool


@dataclass
class PostureBatch:
    images: torch.Tensor
    labels: torch.Tensor
    keypoints: torch.Tensor
    visibility: torch.Tensor

    def __len__(self) -> int:
        return self.labels.shape[0]


def collate_samples(samples: list[PostureSample]) -> PostureBatch:
    return PostureBatch(
        images=torch.stack([s.image for s in samples]),
        labels=torch.tensor([s.class_id for s in samples], dtype=torch.long),
        keypoints=torch.stack([s.keypoints for s in samples]),
        visibility=torch.stack([s.visibility for s in samples]),
    )


def read_image(path: Path, dims: tuple[int, int] | None = None) -> tuple[torch.Tensor, tuple]:
    """Decode an RGB image to a (3, H, W) tensor; returns (image, original (W, H))."""
    try:
        with Image.open(path) as img:
            rgb = img.convert("RGB")
    except OSError as exc:
        raise DatasetError(f"cannot read image {path}: {exc}") from exc
    size = rgb.size
    if dims is not None and size != tuple(dims):
        rgb = rgb.resize(tuple(dims), Image.Resampling.BICUBIC)
    return pixels_to_tensor(np.asarray(rgb, dtype=np.uint8)), size


class PostureDataset(Dataset):
    def __init__(
        self,
        manifest: DatasetManifest,
        topology: SkeletonTopology = DEFAULT_TOPOLOGY,
        image_dims: tuple[int, int] | None = None,
    ):
        self.manifest = manifest
        self.entries = list(manifest.entries)
        self.image_dims = image_dims
        self._poses = manifest.load_poses(topology)
        for entry in self.entries:
            if entry.image_path not in self._poses:
                raise DatasetError(f"entry {entry.image_path}: no pose annotation")

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, index: int) -> PostureSample:
        entry = self.entries[index]
        image, (w, h) = read_image(self.manifest.image_file(entry), self.image_dims)
        pose = self._poses[entry.image_path]
        coords = pose.coords.to(torch.float32)
        if self.image_dims is not None and (w, h) != tuple(self.image_dims):
            coords = coords * torch.tensor(
                [self.image_dims[0] / w, self.image_dims[1] / h], dtype=torch.float32
            )
        return PostureSample(image, entry.class_id, coords, pose.visibility.clone())

    def iter_samples(self) -> Iterator[tuple[torch.Tensor, int, Pose]]:
        for i in range(len(self)):
            s = self[i]
            yield s.image, s.class_id, Pose(s.keypoints.double(), s.visibility,
                                            CoordinateSpace.PIXEL)


def load_dataset(
    manifest: DatasetManifest,
    batch_size: int,
    shuffle_seed: int | None = None,
    image_dims: tuple[int, int] | None = None,
    topology: SkeletonTopology = DEFAULT_TOPOLOGY,
) -> DataLoader:
    """Batched loader; order is fixed by ``shuffle_seed`` (None = manifest order)."""
    if batch_size < 1:
        raise ArgumentError(f"batch_size must be >= 1, got {batch_size}")
    dataset = PostureDataset(manifest, topology, image_dims)
    generator = None
    if shuffle_seed is not None:
        generator = torch.Generator().manual_seed(shuffle_seed)
    return DataLoader(
        dataset,
        batch_size=batch_size,
        shuffle=shuffle_seed is not None,
        generator=generator,
        collate_fn=collate_samples,
        num_workers=0,
    )


def load_class_images(
    manifest: DatasetManifest, image_dims: tuple[int, int] | None = None
) -> dict[int, torch.Tensor]:
    """All images of ``manifest`` grouped by class as (N, 3, H, W) stacks."""
    grouped: dict[int, list[torch.Tensor]] = {}
    for entry in manifest.entries:
        image, _ = read_image(manifest.image_file(entry), image_dims)
        grouped.setdefault(entry.class_id, []).append(image)
    return {c: torch.stack(images) for c, images in sorted(grouped.items())}


# ---------------------------------------------------------------------------
# Canonical poses
# ---------------------------------------------------------------------------

class CanonicalPoses(NamedTuple):
    coords: torch.Tensor      # (C, K, 2) normalized
    visibility: torch.Tensor  # (C, K)


def canonical_keypoints(
    manifest: DatasetManifest, topology: SkeletonTopology = DEFAULT_TOPOLOGY
) -> CanonicalPoses:
    """Reference pose per class.

    Synthetic datasets use the posture bank; ingested datasets fall back to the
    per-class mean of normalized annotated keypoints.
    """
    bank = manifest.bank
    if bank is not None:
        coords = torch.stack([torch.from_numpy(forward_kinematics(s, topology)) for s in bank])
        return CanonicalPoses(coords, torch.ones(coords.shape[:2], dtype=torch.bool))

    poses = manifest.load_poses(topology)
    k = topology.num_joints
    sums = torch.zeros(manifest.num_classes, k, 2, dtype=torch.float64)
    counts = torch.zeros(manifest.num_classes, k, dtype=torch.float64)
    for entry in manifest.entries:
        with Image.open(manifest.image_file(entry)) as img:
            w, h = img.size
        pose = poses[entry.image_path]
        vis = pose.visibility.to(torch.float64)
        scale = torch.tensor([w, h], dtype=torch.float64)
        sums[entry.class_id] += pose.coords / scale * vis[:, None]
        counts[entry.class_id] += vis
    coords = sums / counts.clamp_min(1.0)[..., None]
    return CanonicalPoses(coords.clamp(0.0, 1.0), counts > 0)
