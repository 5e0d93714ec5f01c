"""Feature extractors for FID.

The default is a small convolutional keyposture classifier trained on the
dataset's train split; its 256-d penultimate activations serve as features.
Any other extractor can be plugged in through a ``module:factory`` path.
"""

import importlib
import logging
from pathlib import Path
from typing import Protocol, runtime_checkable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from posekey.dataset import DatasetManifest, Split, load_dataset
from posekey.errors import ArgumentError, CheckpointError
from posekey.synth import derive_seed

logger = logging.getLogger(__name__)

FEATURE_DIM = 256
DEFAULT_SPEC = "synthetic"
FEATURE_CHUNK = 64


@runtime_checkable
class FeatureExtractor(Protocol):
    feature_dim: int
    source: str

    @property
    def identity(self) -> str: ...

    def features(self, images: torch.Tensor) -> np.ndarray: ...


class PostureClassifier(nn.Module):
    def __init__(self, num_classes: int, feature_dim: int = FEATURE_DIM):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(3, 32, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(64, 128, 3, stride=2, padding=1), nn.SiLU(),
            nn.AdaptiveAvgPool2d(4),
            nn.Flatten(),
            nn.Linear(128 * 16, feature_dim), nn.SiLU(),
        )
        self.head = nn.Linear(feature_dim, num_classes)

    def embed(self, images: torch.Tensor) -> torch.Tensor:
        return self.body(images)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.head(self.embed(images))


class ClassifierFeatureExtractor:
    source = "trained-on-synthetic"

    def __init__(self, model: PostureClassifier, dataset_hash: str = "", image_size: int = 0):
        self.model = model.eval()
        self.dataset_hash = dataset_hash
        self.image_size = image_size
        self.feature_dim = model.head.in_features

    @property
    def identity(self) -> str:
        """Dataset and input resolution the classifier was trained on."""
        return f"posture-classifier:{self.dataset_hash[:12]}:{self.image_size}px"

    @torch.no_grad()
    def features(self, images: torch.Tensor) -> np.ndarray:
        parts = [self.model.embed(chunk.float()) for chunk in images.split(FEATURE_CHUNK)]
        if not parts:
            return np.zeros((0, self.feature_dim))
        return torch.cat(parts).to(torch.float64).numpy()

    def accuracy(self, images: torch.Tensor, labels: torch.Tensor) -> float:
        with torch.no_grad():
            logits = torch.cat([self.model(c.float()) for c in images.split(FEATURE_CHUNK)])
        return float((logits.argmax(dim=1) == labels).float().mean())

    def save(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save({
            "dataset_hash": self.dataset_hash,
            "image_size": self.image_size,
            "num_classes": self.model.head.out_features,
            "state": self.model.state_dict(),
        }, path)

    @classmethod
    def load(cls, path: Path) -> "ClassifierFeatureExtractor":
        try:
            payload = torch.load(path, map_location="cpu", weights_only=True)
            model = PostureClassifier(int(payload["num_classes"]))
            model.load_state_dict(payload["state"])
        except (OSError, KeyError, RuntimeError) as exc:
            raise CheckpointError(f"cannot load feature extractor {path}: {exc}") from exc
        return cls(model, payload["dataset_hash"], int(payload.get("image_size", 0)))


def train_feature_extractor(
    manifest: DatasetManifest,
    image_size: int,
    epochs: int = 3,
    batch_size: int = 64,
    learning_rate: float = 1e-3,
    seed: int = 0,
) -> ClassifierFeatureExtractor:
    torch.manual_seed(derive_seed(seed, "feature-extractor"))
    model = PostureClassifier(manifest.num_classes)
    optimizer = torch.optim.Adam(model.parameters(), lr=learning_rate)
    train_split = manifest.subset(Split.TRAIN)
    model.train()
    for epoch in range(epochs):
        loader = load_dataset(train_split, batch_size, derive_seed(seed, "fx-epoch", epoch),
                              image_dims=(image_size, image_size))
        total, n = 0.0, 0
        for batch in loader:
            loss = F.cross_entropy(model(batch.images), batch.labels)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            total += float(loss) * len(batch)
            n += len(batch)
        logger.info("feature extractor epoch %d: loss %.4f", epoch + 1, total / max(n, 1))
    return ClassifierFeatureExtractor(model, manifest.hash(), image_size)


def load_or_train_feature_extractor(
    manifest: DatasetManifest, image_size: int, cache_dir: Path, seed: int = 0
) -> ClassifierFeatureExtractor:
    """Reuse a classifier trained on the same dataset and resolution, else train one."""
    dataset_hash = manifest.hash()
    path = cache_dir / f"feature_extractor_{dataset_hash[:16]}_{image_size}.pt"
    if path.is_file():
        extractor = ClassifierFeatureExtractor.load(path)
        if extractor.dataset_hash == dataset_hash and extractor.image_size == image_size:
            return extractor
    extractor = train_feature_extractor(manifest, image_size, seed=seed)
    extractor.save(path)
    return extractor


def resolve_feature_extractor(
    spec: str, manifest: DatasetManifest, image_size: int, cache_dir: Path, seed: int = 0
) -> FeatureExtractor:
    """``synthetic`` for the trained classifier, or ``package.module:factory``.

    A factory is called with no arguments and must return a FeatureExtractor.
    """
    if spec == DEFAULT_SPEC:
        return load_or_train_feature_extractor(manifest, image_size, cache_dir, seed)
    module_name, _, attr = spec.partition(":")
    if not module_name or not attr:
        raise ArgumentError(f"feature extractor must be 'synthetic' or 'module:factory', "
                            f"got '{spec}'")
    try:
        factory = getattr(importlib.import_module(module_name), attr)
    except (ImportError, AttributeError) as exc:
        raise ArgumentError(f"cannot import feature extractor '{spec}': {exc}") from exc
    extractor = factory()
    if not isinstance(extractor, FeatureExtractor):
        raise ArgumentError(f"'{spec}' did not return a feature extractor")
    return extractor
