"""Class-conditional noise-prediction U-Net.

Four encoder stages of two residual blocks and a strided-conv downsample,
a residual bottleneck, and four decoder stages that upsample (nearest 2x + conv),
concatenate the matching skip and apply two residual blocks. Time and class
embeddings are summed and injected into every residual block; self-attention
runs at the configured resolutions.
"""

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from posekey.diffusion import sinusoidal_time_embedding
from posekey.errors import ArgumentError

DEFAULT_CHANNEL_MULTS = (1, 2, 4, 8)
DEFAULT_ATTENTION_RESOLUTIONS = (16, 8)


def _norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(32, channels), channels)


class ResidualBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, emb_dim: int):
        super().__init__()
        self.norm1 = _norm(in_channels)
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.emb = nn.Linear(emb_dim, out_channels)
        self.norm2 = _norm(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.skip = (nn.Conv2d(in_channels, out_channels, 1)
                     if in_channels != out_channels else nn.Identity())

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class SelfAttention(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.norm = _norm(channels)
        self.qkv = nn.Conv2d(channels, channels * 3, 1)
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, c, h * w).unbind(dim=1)
        attn = torch.softmax(torch.einsum("bci,bcj->bij", q, k) / math.sqrt(c), dim=-1)
        out = torch.einsum("bij,bcj->bci", attn, v).reshape(b, c, h, w)
        return x + self.proj(out)


class _Stage(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, emb_dim: int, attention: bool):
        super().__init__()
        self.res1 = ResidualBlock(in_channels, out_channels, emb_dim)
        self.res2 = ResidualBlock(out_channels, out_channels, emb_dim)
        self.attn = SelfAttention(out_channels) if attention else nn.Identity()

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        return self.attn(self.res2(self.res1(x, emb), emb))


class DiffusionUNet(nn.Module):
    """ε_θ(x_t, t, y). Label index ``num_classes`` is the null (unconditional) label."""

    def __init__(
        self,
        image_size: int,
        num_classes: int,
        base_channels: int = 64,
        channel_mults: tuple[int, ...] = DEFAULT_CHANNEL_MULTS,
        attention_resolutions: tuple[int, ...] = DEFAULT_ATTENTION_RESOLUTIONS,
    ):
        super().__init__()
        factor = 2 ** len(channel_mults)
        if image_size % factor:
            raise ArgumentError(f"image size {image_size} must be divisible by {factor}")
        if num_classes < 1:
            raise ArgumentError("num_classes must be >= 1")
        self.image_size = image_size
        self.num_classes = num_classes
        self.base_channels = base_channels
        emb_dim = base_channels * 4

        self.time_mlp = nn.Sequential(
            nn.Linear(base_channels, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim)
        )
        self.class_emb = nn.Embedding(num_classes + 1, emb_dim)
        self.stem = nn.Conv2d(3, base_channels, 3, padding=1)

        widths = [base_channels * m for m in channel_mults]
        self.encoder = nn.ModuleList()
        self.downsample = nn.ModuleList()
        res, ch = image_size, base_channels
        for width in widths:
            self.encoder.append(_Stage(ch, width, emb_dim, res in attention_resolutions))
            self.downsample.append(nn.Conv2d(width, width, 3, stride=2, padding=1))
            ch, res = width, res // 2

        self.bottleneck = ResidualBlock(ch, ch, emb_dim)
        self.bottleneck_attn = (SelfAttention(ch) if res in attention_resolutions
                                else nn.Identity())

        self.upsample = nn.ModuleList()
        self.decoder = nn.ModuleList()
        for width in reversed(widths):
            res *= 2
            self.upsample.append(nn.Conv2d(ch, width, 3, padding=1))
            self.decoder.append(_Stage(width * 2, width, emb_dim, res in attention_resolutions))
            ch = width

        self.out = nn.Sequential(_norm(ch), nn.SiLU(), nn.Conv2d(ch, 3, 3, padding=1))

    def forward(self, x: torch.Tensor, t: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        t = torch.as_tensor(t, device=x.device).reshape(-1).expand(x.shape[0])
        emb = self.time_mlp(sinusoidal_time_embedding(t, self.base_channels).to(x.dtype))
        emb = emb + self.class_emb(torch.as_tensor(y, device=x.device).reshape(-1))

        h = self.stem(x)
        skips = []
        for stage, down in zip(self.encoder, self.downsample):
            h = stage(h, emb)
            skips.append(h)
            h = down(h)

        h = self.bottleneck_attn(self.bottleneck(h, emb))

        for up, stage in zip(self.upsample, self.decoder):
            h = up(F.interpolate(h, scale_factor=2, mode="nearest"))
            h = stage(torch.cat([h, skips.pop()], dim=1), emb)
        return self.out(h)
