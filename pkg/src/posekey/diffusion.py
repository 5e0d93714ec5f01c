"""DDPM noise schedule, forward process, x0 inversion and ancestral sampling."""

import math
from dataclasses import dataclass
from typing import NamedTuple, Protocol

import torch
import torch.nn.functional as F

from posekey.errors import ArgumentError

DEFAULT_STEPS = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02
EMBEDDING_BASE = 10000.0


class NoisePredictor(Protocol):
    num_classes: int
    image_size: int

    def __call__(self, x_t: torch.Tensor, t: torch.Tensor, y: torch.Tensor) -> torch.Tensor: ...


@dataclass(frozen=True)
class DiffusionSchedule:
    beta: torch.Tensor
    alpha: torch.Tensor
    alpha_bar: torch.Tensor
    beta_start: float
    beta_end: float

    @property
    def T(self) -> int:  # noqa: N802
        return self.beta.shape[0]

    def to_dict(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}

    @classmethod
    def from_dict(cls, data: dict) -> "DiffusionSchedule":
        return make_beta_schedule(int(data["T"]), float(data["beta_start"]),
                                  float(data["beta_end"]))

    def check_step(self, t: int | torch.Tensor) -> None:
        t_min, t_max = (int(t), int(t)) if isinstance(t, int) else (int(t.min()), int(t.max()))
        if t_min < 0 or t_max >= self.T:
            raise ArgumentError(f"timestep out of range [0, {self.T}): {t_min}..{t_max}")


def make_beta_schedule(
    T: int = DEFAULT_STEPS,  # noqa: N803
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
) -> DiffusionSchedule:
    """Linear β schedule; ᾱ is the running product of α = 1 - β."""
    if T < 1:
        raise ArgumentError(f"T must be >= 1, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ArgumentError(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )
    beta = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    alpha = 1.0 - beta
    return DiffusionSchedule(beta, alpha, torch.cumprod(alpha, dim=0), beta_start, beta_end)


def sinusoidal_time_embedding(
    t: int | torch.Tensor, dim: int, num_steps: int | None = None
) -> torch.Tensor:
    """Interleaved embedding: [sin(t f_0), cos(t f_0), sin(t f_1), ...].

    f_i = 10000^(-2i/dim). Scalar ``t`` gives a ``(dim,)`` vector, a tensor of
    shape ``(B,)`` gives ``(B, dim)``.
    """
    if dim <= 0 or dim % 2:
        raise ArgumentError(f"embedding dim must be a positive even number, got {dim}")
    steps = torch.as_tensor(t)
    if num_steps is not None and (bool((steps < 0).any()) or bool((steps >= num_steps).any())):
        raise ArgumentError(f"timestep out of range [0, {num_steps})")
    steps = steps.to(torch.float32)
    freqs = torch.exp(
        -math.log(EMBEDDING_BASE) * torch.arange(0, dim, 2, dtype=torch.float32) / dim
    ).to(steps.device)
    args = steps[..., None] * freqs
    return torch.stack([torch.sin(args), torch.cos(args)], dim=-1).flatten(start_dim=-2)


def _coef(values: torch.Tensor, t: int | torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    """Gather per-sample schedule values shaped to broadcast over ``like``."""
    picked = values.to(like.device)[torch.as_tensor(t, device=like.device)]
    if picked.ndim == 0:
        return picked.to(like.dtype)
    return picked.to(like.dtype).view(-1, *([1] * (like.ndim - 1)))


def forward_diffuse(
    x0: torch.Tensor, t: int | torch.Tensor, eps: torch.Tensor, sched: DiffusionSchedule
) -> torch.Tensor:
    if eps.shape != x0.shape:
        raise ArgumentError(f"eps shape {tuple(eps.shape)} != x0 shape {tuple(x0.shape)}")
    sched.check_step(t)
    ab = _coef(sched.alpha_bar, t, x0)
    return ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps


def predict_x0(
    x_t: torch.Tensor,
    eps_pred: torch.Tensor,
    t: int | torch.Tensor,
    sched: DiffusionSchedule,
    clamp: bool = True,
) -> torch.Tensor:
    sched.check_step(t)
    ab = _coef(sched.alpha_bar, t, x_t)
    x0 = (x_t - (1.0 - ab).sqrt() * eps_pred) / ab.sqrt()
    return x0.clamp(-1.0, 1.0) if clamp else x0


class NoisedPrediction(NamedTuple):
    t: torch.Tensor
    eps: torch.Tensor
    x_t: torch.Tensor
    eps_pred: torch.Tensor


def noised_prediction(
    model: NoisePredictor,
    x0: torch.Tensor,
    y: torch.Tensor,
    sched: DiffusionSchedule,
    rng: torch.Generator,
    condition: torch.Tensor | None = None,
) -> NoisedPrediction:
    """Draw t and ε per sample, noise ``x0`` and run the model once.

    ``condition`` overrides the labels fed to the model (e.g. after label dropout).
    """
    batch = x0.shape[0]
    t = torch.randint(0, sched.T, (batch,), generator=rng)
    eps = torch.randn(x0.shape, generator=rng, dtype=x0.dtype)
    x_t = forward_diffuse(x0, t, eps, sched)
    eps_pred = model(x_t, t, y if condition is None else condition)
    return NoisedPrediction(t, eps, x_t, eps_pred)


class ReconLoss(NamedTuple):
    value: torch.Tensor
    prediction: NoisedPrediction


def diffusion_recon_loss(
    model: NoisePredictor,
    x0: torch.Tensor,
    y: torch.Tensor,
    sched: DiffusionSchedule,
    rng: torch.Generator,
    condition: torch.Tensor | None = None,
) -> ReconLoss:
    """MSE between drawn and predicted noise; ``prediction`` keeps x_t and t for x0 estimates."""
    pred = noised_prediction(model, x0, y, sched, rng, condition)
    return ReconLoss(F.mse_loss(pred.eps_pred, pred.eps), pred)


@torch.no_grad()
def ddpm_sample(
    model: NoisePredictor,
    y: torch.Tensor,
    sched: DiffusionSchedule,
    seed: int,
    guidance_scale: float = 0.0,
) -> torch.Tensor:
    """Ancestral DDPM sampling from pure noise for a batch of labels.

    With ``guidance_scale`` s > 0 the noise estimate is
    (1 + s)·ε(x, y) - s·ε(x, null), null being label index ``num_classes``.
    Reverse steps use the posterior variance β_t(1 - ᾱ_{t-1})/(1 - ᾱ_t).
    """
    if guidance_scale < 0:
        raise ArgumentError(f"guidance_scale must be >= 0, got {guidance_scale}")
    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()

    y = torch.as_tensor(y, dtype=torch.long).reshape(-1)
    batch = y.shape[0]
    size = model.image_size
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn((batch, 3, size, size), generator=gen)
    null = torch.full_like(y, model.num_classes)

    for step in reversed(range(sched.T)):
        t = torch.full((batch,), step, dtype=torch.long)
        eps = model(x, t, y)
        if guidance_scale > 0:
            eps = (1.0 + guidance_scale) * eps - guidance_scale * model(x, t, null)
        beta = float(sched.beta[step])
        alpha = float(sched.alpha[step])
        ab = float(sched.alpha_bar[step])
        mean = (x - beta / math.sqrt(1.0 - ab) * eps) / math.sqrt(alpha)
        if step > 0:
            ab_prev = float(sched.alpha_bar[step - 1])
            var = beta * (1.0 - ab_prev) / (1.0 - ab)
            x = mean + math.sqrt(var) * torch.randn(x.shape, generator=gen)
        else:
            x = mean

    if was_training and hasattr(model, "train"):
        model.train()
    return x.clamp(-1.0, 1.0)
