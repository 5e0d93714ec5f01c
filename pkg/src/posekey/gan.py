"""Fully connected conditional GAN with non-saturating logistic losses."""

from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from posekey.errors import ArgumentError

DEFAULT_LATENT_DIM = 128
DEFAULT_LABEL_DIM = 64
DEFAULT_HIDDEN = (256, 512, 1024)


def _mlp(widths: list[int]) -> list[nn.Module]:
    layers: list[nn.Module] = []
    for w_in, w_out in zip(widths[:-1], widths[1:]):
        layers += [nn.Linear(w_in, w_out), nn.LeakyReLU(0.2)]
    return layers


class ConditionalGenerator(nn.Module):
    """(z, y) -> image: label embedding concatenated with z, tanh output."""

    def __init__(
        self,
        image_size: int,
        num_classes: int,
        latent_dim: int = DEFAULT_LATENT_DIM,
        label_dim: int = DEFAULT_LABEL_DIM,
        hidden: tuple[int, ...] = DEFAULT_HIDDEN,
    ):
        super().__init__()
        self.image_size = image_size
        self.num_classes = num_classes
        self.latent_dim = latent_dim
        self.label_emb = nn.Embedding(num_classes, label_dim)
        out_dim = 3 * image_size * image_size
        self.net = nn.Sequential(
            *_mlp([latent_dim + label_dim, *hidden]),
            nn.Linear(hidden[-1], out_dim),
            nn.Tanh(),
        )

    def forward(self, z: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        h = torch.cat([z, self.label_emb(y)], dim=1)
        return self.net(h).view(-1, 3, self.image_size, self.image_size)


class ConditionalDiscriminator(nn.Module):
    """(image, y) -> real/fake logit."""

    def __init__(
        self,
        image_size: int,
        num_classes: int,
        label_dim: int = DEFAULT_LABEL_DIM,
        hidden: tuple[int, ...] = DEFAULT_HIDDEN,
    ):
        super().__init__()
        self.label_emb = nn.Embedding(num_classes, label_dim)
        in_dim = 3 * image_size * image_size + label_dim
        self.net = nn.Sequential(
            *_mlp([in_dim, *reversed(hidden)]),
            nn.Linear(hidden[0], 1),
        )

    def forward(self, image: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        h = torch.cat([image.flatten(start_dim=1), self.label_emb(y)], dim=1)
        return self.net(h).squeeze(1)


@dataclass
class GanPair:
    generator: ConditionalGenerator
    discriminator: ConditionalDiscriminator

    @property
    def latent_dim(self) -> int:
        return self.generator.latent_dim

    @property
    def num_classes(self) -> int:
        return self.generator.num_classes

    @property
    def image_size(self) -> int:
        return self.generator.image_size


def build_gan_pair(
    image_size: int,
    num_classes: int,
    latent_dim: int = DEFAULT_LATENT_DIM,
    label_dim: int = DEFAULT_LABEL_DIM,
    hidden: tuple[int, ...] = DEFAULT_HIDDEN,
) -> GanPair:
    if num_classes < 1 or image_size < 1 or not hidden:
        raise ArgumentError("GAN needs positive image size, at least one class and one layer")
    return GanPair(
        ConditionalGenerator(image_size, num_classes, latent_dim, label_dim, hidden),
        ConditionalDiscriminator(image_size, num_classes, label_dim, hidden),
    )


def gan_generate(pair: GanPair, z: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    if z.ndim != 2 or z.shape[1] != pair.latent_dim or z.shape[0] != y.shape[0]:
        raise ArgumentError(
            f"expected z of shape (B, {pair.latent_dim}) matching {y.shape[0]} labels"
        )
    return pair.generator(z, y)


class AdversarialLosses(NamedTuple):
    generator: torch.Tensor
    discriminator: torch.Tensor


def adversarial_losses_from_logits(
    real_logits: torch.Tensor, fake_logits: torch.Tensor
) -> AdversarialLosses:
    """Non-saturating losses; -log σ(x) is written as softplus(-x) for stability."""
    l_d = F.softplus(-real_logits).mean() + F.softplus(fake_logits).mean()
    l_g = F.softplus(-fake_logits).mean()
    return AdversarialLosses(l_g, l_d)


def gan_adversarial_losses(
    pair: GanPair, real: torch.Tensor, fake: torch.Tensor, y: torch.Tensor
) -> AdversarialLosses:
    if real.shape != fake.shape or real.shape[0] != y.shape[0]:
        raise ArgumentError("real, fake and label batches must have matching shapes")
    return adversarial_losses_from_logits(
        pair.discriminator(real, y), pair.discriminator(fake, y)
    )
