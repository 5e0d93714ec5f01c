"""Tests for posekey.diffusion: schedule, embedding, forward process and sampling."""

import math

import pytest
import torch

from posekey.diffusion import (
    DiffusionSchedule,
    ddpm_sample,
    diffusion_recon_loss,
    forward_diffuse,
    make_beta_schedule,
    predict_x0,
    sinusoidal_time_embedding,
)
from posekey.errors import ArgumentError


class ConstantNoise:
    """Noise predictor stub returning ``value`` everywhere and recording labels."""

    def __init__(self, value: float = 0.0, num_classes: int = 3, image_size: int = 8):
        self.value = value
        self.num_classes = num_classes
        self.image_size = image_size
        self.labels_seen: list[list[int]] = []

    def __call__(self, x_t, t, y):
        self.labels_seen.append(y.tolist())
        return torch.full_like(x_t, self.value)


class TestSchedule:
    def test_defaults(self):
        sched = make_beta_schedule()
        assert sched.T == 1000
        assert sched.beta[0].item() == pytest.approx(1e-4)
        assert sched.beta[-1].item() == pytest.approx(0.02)

    def test_alpha_bar_is_running_product(self):
        sched = make_beta_schedule(50)
        assert sched.alpha_bar[0].item() == pytest.approx(1 - 1e-4)
        assert torch.allclose(sched.alpha_bar[1:] / sched.alpha_bar[:-1], sched.alpha[1:])
        assert bool((sched.alpha_bar[1:] < sched.alpha_bar[:-1]).all())

    def test_dict_roundtrip(self):
        sched = make_beta_schedule(20, 1e-3, 0.05)
        again = DiffusionSchedule.from_dict(sched.to_dict())
        assert torch.equal(again.beta, sched.beta)

    @pytest.mark.parametrize("args", [(0,), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0)])
    def test_rejects_bad_arguments(self, args):
        with pytest.raises(ArgumentError):
            make_beta_schedule(*args)


class TestTimeEmbedding:
    def test_zero_step(self):
        emb = sinusoidal_time_embedding(0, 8)
        assert emb.tolist() == [0.0, 1.0] * 4

    def test_interleaved_layout(self):
        emb = sinusoidal_time_embedding(torch.tensor([3]), 4)
        f1 = 10000 ** (-2 / 4)
        expected = [math.sin(3), math.cos(3), math.sin(3 * f1), math.cos(3 * f1)]
        assert emb.shape == (1, 4)
        assert emb[0].tolist() == pytest.approx(expected, abs=1e-6)

    def test_distinct_steps_distinct_vectors(self):
        emb = sinusoidal_time_embedding(torch.arange(100), 32)
        assert torch.unique(emb, dim=0).shape[0] == 100

    def test_odd_dim(self):
        with pytest.raises(ArgumentError):
            sinusoidal_time_embedding(1, 7)

    def test_out_of_range_step(self):
        with pytest.raises(ArgumentError):
            sinusoidal_time_embedding(torch.tensor([10]), 8, num_steps=10)


class TestForwardProcess:
    @pytest.mark.parametrize("t", [0, 500, 999])
    def test_x0_roundtrip(self, t):
        sched = make_beta_schedule()
        gen = torch.Generator().manual_seed(t)
        x0 = torch.rand(2, 3, 8, 8, generator=gen, dtype=torch.float64) * 2 - 1
        eps = torch.randn(x0.shape, generator=gen, dtype=torch.float64)
        x_t = forward_diffuse(x0, t, eps, sched)
        assert torch.allclose(predict_x0(x_t, eps, t, sched, clamp=False), x0, atol=1e-6)

    def test_per_sample_steps(self):
        sched = make_beta_schedule(10)
        x0 = torch.ones(2, 3, 4, 4)
        eps = torch.zeros_like(x0)
        x_t = forward_diffuse(x0, torch.tensor([0, 9]), eps, sched)
        assert x_t[0, 0, 0, 0].item() == pytest.approx(sched.alpha_bar[0].sqrt().item())
        assert x_t[1, 0, 0, 0].item() == pytest.approx(sched.alpha_bar[9].sqrt().item())

    def test_clamped_prediction(self):
        sched = make_beta_schedule(10)
        x_t = torch.full((1, 3, 2, 2), 5.0)
        assert predict_x0(x_t, torch.zeros_like(x_t), 3, sched).max().item() == 1.0

    def test_step_out_of_range(self):
        sched = make_beta_schedule(10)
        x0 = torch.zeros(1, 3, 2, 2)
        with pytest.raises(ArgumentError, match="timestep"):
            forward_diffuse(x0, 10, x0, sched)

    def test_shape_mismatch(self):
        sched = make_beta_schedule(10)
        with pytest.raises(ArgumentError):
            forward_diffuse(torch.zeros(1, 3, 2, 2), 0, torch.zeros(1, 3, 2, 3), sched)

    def test_recon_loss_of_perfect_predictor_is_zero(self):
        sched = make_beta_schedule(10)

        class Oracle:
            num_classes, image_size = 2, 4

            def __call__(self, x_t, t, y):
                ab = sched.alpha_bar[t].float().view(-1, 1, 1, 1)
                return (x_t - ab.sqrt() * x0) / (1 - ab).sqrt()

        x0 = torch.rand(3, 3, 4, 4) * 2 - 1
        loss = diffusion_recon_loss(Oracle(), x0, torch.tensor([0, 1, 0]), sched,
                                    torch.Generator().manual_seed(0))
        assert loss.value.item() == pytest.approx(0.0, abs=1e-8)
        assert loss.prediction.x_t.shape == x0.shape


class TestSampling:
    def test_deterministic_for_seed(self):
        sched = make_beta_schedule(20)
        model = ConstantNoise(0.1)
        a = ddpm_sample(model, torch.tensor([0, 1]), sched, seed=5)
        b = ddpm_sample(model, torch.tensor([0, 1]), sched, seed=5)
        c = ddpm_sample(model, torch.tensor([0, 1]), sched, seed=6)
        assert torch.equal(a, b)
        assert not torch.equal(a, c)

    def test_output_shape_and_range(self):
        out = ddpm_sample(ConstantNoise(), torch.tensor([2, 0, 1]), make_beta_schedule(5), 0)
        assert out.shape == (3, 3, 8, 8)
        assert out.min().item() >= -1.0 and out.max().item() <= 1.0

    def test_guidance_queries_null_label(self):
        model = ConstantNoise(num_classes=3)
        ddpm_sample(model, torch.tensor([1]), make_beta_schedule(2), 0, guidance_scale=2.0)
        assert [3] in model.labels_seen
        assert len(model.labels_seen) == 4

    def test_no_guidance_single_pass(self):
        model = ConstantNoise(num_classes=3)
        ddpm_sample(model, torch.tensor([1]), make_beta_schedule(2), 0)
        assert model.labels_seen == [[1], [1]]

    def test_guidance_with_equal_estimates_is_neutral(self):
        sched = make_beta_schedule(5)
        plain = ddpm_sample(ConstantNoise(0.2), torch.tensor([0]), sched, 1)
        guided = ddpm_sample(ConstantNoise(0.2), torch.tensor([0]), sched, 1, guidance_scale=3)
        assert torch.allclose(plain, guided, atol=1e-5)

    def test_negative_guidance(self):
        with pytest.raises(ArgumentError):
            ddpm_sample(ConstantNoise(), torch.tensor([0]), make_beta_schedule(2), 0, -1.0)
