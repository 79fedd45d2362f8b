import math

import numpy as np
import pytest
import torch

from m2hvideo.diffusion import (
    cfg_combine,
    cosine_alpha_bar,
    cosine_schedule,
    ddim_step,
    one_step_denoise,
    q_sample,
    uniform_timesteps,
)
from m2hvideo.errors import OrderingError, RangeError, ShapeError

# independent high-precision evaluation of the closed form, frozen
ALPHA_BAR_500_OF_1000 = 0.4938435904406377


def latent(shape=(2, 4, 8, 4), seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g, dtype=dtype)


class TestCosineAlphaBar:
    def test_t0_is_one(self):
        assert abs(cosine_alpha_bar(0, 1000) - 1.0) < 1e-3

    def test_endpoint_clamped(self):
        # raw closed-form value at t = T is ~7e-63, far below 1e-4
        assert cosine_alpha_bar(1000, 1000) == 1e-5

    def test_midpoint_regression(self):
        assert cosine_alpha_bar(500, 1000) == pytest.approx(ALPHA_BAR_500_OF_1000, abs=1e-12)

    def test_out_of_range(self):
        with pytest.raises(RangeError):
            cosine_alpha_bar(-1, 100)
        with pytest.raises(RangeError):
            cosine_alpha_bar(101, 100)


class TestScheduleInvariants:
    @pytest.mark.parametrize("T", [10, 50, 1000])
    def test_monotone_and_consistent(self, T):
        sched = cosine_schedule(T)
        ab, sg = sched.alpha_bar, sched.sigma
        assert ab[0] >= 0.999
        assert np.all(np.diff(ab) < 0)
        assert sg[0] <= 0.04
        assert np.all(np.diff(sg) > 0)
        assert np.max(np.abs(sg**2 * ab - (1 - ab))) <= 1e-9


class TestQSample:
    def test_zero_noise(self):
        sched = cosine_schedule(100)
        z0 = latent()
        out = q_sample(z0, 37, torch.zeros_like(z0), sched)
        assert torch.equal(out, math.sqrt(sched.alpha_bar[37]) * z0)

    def test_zero_signal(self):
        sched = cosine_schedule(100)
        eps = latent(seed=1)
        out = q_sample(torch.zeros_like(eps), 37, eps, sched)
        assert torch.equal(out, math.sqrt(1 - sched.alpha_bar[37]) * eps)

    def test_monte_carlo_variance(self):
        # empirical per-element variance of q_sample(0, t, eps) matches 1 - a_bar
        sched = cosine_schedule(1000)
        t = 300
        g = torch.Generator().manual_seed(7)
        eps = torch.randn(10_000, 16, generator=g, dtype=torch.float64)
        out = q_sample(torch.zeros_like(eps), t, eps, sched)
        var = out.var(dim=0, unbiased=True)
        target = 1 - sched.alpha_bar[t]
        assert torch.all((var - target).abs() / target < 0.05)

    def test_shape_mismatch(self):
        sched = cosine_schedule(10)
        with pytest.raises(ShapeError):
            q_sample(latent(), 5, latent(shape=(2, 4, 8, 5)), sched)


class TestOneStepDenoise:
    def test_exact_inverts_q_sample(self):
        sched = cosine_schedule(1000)
        z0, eps = latent(seed=2), latent(seed=3)
        for t in (1, 250, 500, 997, 1000):
            z_t = q_sample(z0, t, eps, sched)
            rec = one_step_denoise(z_t, eps, t, sched, mode="exact")
            assert torch.max(torch.abs(rec - z0)) < 1e-5

    def test_paper_mode_sigma_zero(self):
        # at sigma = 0 the preconditioned form returns z_t unchanged
        sched = cosine_schedule(1000)
        z_t = latent(seed=4)
        t = 1  # sigma[1] is tiny but nonzero; build the identity directly
        sg = sched.sigma[t]
        out = one_step_denoise(z_t, torch.zeros_like(z_t), t, sched, mode="paper")
        assert torch.allclose(out, z_t / (sg**2 + 1), atol=0)

    def test_paper_scalar_case(self):
        # sigma_t = 1: 1/2 - 0.5/sqrt(2), evaluated independently
        sched = cosine_schedule(1000)
        t = int(np.argmin(np.abs(sched.sigma - 1.0)))
        sg = sched.sigma[t]
        z = torch.tensor([1.0], dtype=torch.float64)
        e = torch.tensor([0.5], dtype=torch.float64)
        out = one_step_denoise(z, e, t, sched, mode="paper")
        expected = 1.0 / (sg**2 + 1) - (sg / math.sqrt(sg**2 + 1)) * 0.5
        assert out.item() == pytest.approx(expected, abs=1e-12)
        # and the frozen value at sigma exactly 1
        assert (0.5 - 0.5 / math.sqrt(2)) == pytest.approx(0.14644660940672624, abs=1e-12)

    def test_unknown_mode(self):
        sched = cosine_schedule(10)
        with pytest.raises(RangeError):
            one_step_denoise(latent(), latent(), 5, sched, mode="other")


class TestCfgCombine:
    def test_scale_one_is_cond(self):
        a, b = latent(seed=5), latent(seed=6)
        assert torch.max(torch.abs(cfg_combine(a, b, 1.0) - b)) < 1e-6

    def test_scale_zero_is_uncond(self):
        a, b = latent(seed=5), latent(seed=6)
        assert torch.equal(cfg_combine(a, b, 0.0), a)

    def test_direct_value(self):
        a = torch.zeros(3, 2, 4, 4)
        b = torch.ones(3, 2, 4, 4)
        assert torch.all(cfg_combine(a, b, 7.5) == 7.5)

    def test_affine_in_scale(self):
        a, b = latent(seed=7), latent(seed=8)
        s1, s2 = 2.3, -0.7
        lhs = cfg_combine(a, b, s1) + cfg_combine(a, b, s2) - cfg_combine(a, b, s1 + s2)
        assert torch.max(torch.abs(lhs - a)) < 1e-6


class TestDdimStep:
    def test_tprev_zero_returns_estimate(self):
        sched = cosine_schedule(1000)
        z0, eps = latent(seed=9), latent(seed=10)
        t = 400
        z_t = q_sample(z0, t, eps, sched)
        out = ddim_step(z_t, eps, t, 0, sched)
        assert torch.max(torch.abs(out - z0)) < 1e-3

    def test_trajectory_recovers_signal(self):
        # exact noise predictions walk the 50-step trajectory back to z0
        sched = cosine_schedule(1000)
        z0, eps = latent(seed=11), latent(seed=12)
        ts = uniform_timesteps(1000, 50)
        z = q_sample(z0, ts[0], eps, sched)
        for t, t_prev in zip(ts[:-1], ts[1:]):
            z = ddim_step(z, eps, t, t_prev, sched)
        assert torch.max(torch.abs(z - z0)) < 1e-3

    @pytest.mark.parametrize("subseq", [[1000, 700, 350, 120, 0], [800, 799, 401, 3, 0]])
    def test_trajectory_any_monotone_subsequence(self, subseq):
        sched = cosine_schedule(1000)
        z0, eps = latent(seed=13), latent(seed=14)
        z = q_sample(z0, subseq[0], eps, sched)
        for t, t_prev in zip(subseq[:-1], subseq[1:]):
            z = ddim_step(z, eps, t, t_prev, sched)
        assert torch.max(torch.abs(z - z0)) < 1e-3

    def test_single_step_matches_q_sample(self):
        sched = cosine_schedule(1000)
        z0, eps = latent(seed=15), latent(seed=16)
        t = 513
        z_t = q_sample(z0, t, eps, sched)
        out = ddim_step(z_t, eps, t, t - 1, sched)
        assert torch.max(torch.abs(out - q_sample(z0, t - 1, eps, sched))) < 1e-5

    def test_ordering_error(self):
        sched = cosine_schedule(100)
        with pytest.raises(OrderingError):
            ddim_step(latent(), latent(), 5, 5, sched)
        with pytest.raises(OrderingError):
            ddim_step(latent(), latent(), 5, 9, sched)


class TestUniformTimesteps:
    def test_fifty_over_thousand(self):
        ts = uniform_timesteps(1000, 50)
        assert ts[0] == 1000 and ts[-1] == 0
        assert len(ts) == 51
        assert all(a > b for a, b in zip(ts, ts[1:]))

    def test_more_steps_than_T(self):
        ts = uniform_timesteps(10, 50)
        assert ts == list(range(10, -1, -1))
