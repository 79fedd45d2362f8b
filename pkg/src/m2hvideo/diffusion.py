"""Diffusion numerics: noise schedule, forward noising, one-step denoising,
deterministic few-step sampling updates, and guidance combination.

Latent videos are torch tensors of shape [N, C, h, w]. All functions are pure
and safe to call concurrently; ``NoiseSchedule`` is immutable after
construction.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import OrderingError, RangeError, ShapeError

ALPHA_BAR_FLOOR = 1e-5
COSINE_OFFSET = 0.008


def cosine_alpha_bar(t: int, num_steps: int) -> float:
    """Squared-cosine cumulative signal level at timestep ``t`` of ``num_steps``.

    Returns f(t)/f(0) with f(t) = cos^2(((t/T + s)/(1 + s)) * pi/2), s = 0.008,
    clamped to [1e-5, 1].
    """
    if num_steps < 1:
        raise RangeError(f"num_steps must be >= 1, got {num_steps}")
    if not 0 <= t <= num_steps:
        raise RangeError(f"timestep {t} outside [0, {num_steps}]")

    def f(u: float) -> float:
        return math.cos((u / num_steps + COSINE_OFFSET) / (1 + COSINE_OFFSET) * math.pi / 2) ** 2

    value = f(t) / f(0)
    return min(max(value, ALPHA_BAR_FLOOR), 1.0)


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed per-timestep alpha_bar / sigma tables, indices 0..T.

    Invariants (checked at construction): alpha_bar strictly decreasing with
    alpha_bar[0] >= 0.999; sigma strictly increasing with sigma[0] <= 0.04;
    sigma[t]^2 * alpha_bar[t] == 1 - alpha_bar[t] to 1e-9.
    """

    num_steps: int
    alpha_bar: np.ndarray = field(repr=False)
    sigma: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.num_steps < 1:
            raise RangeError(f"num_steps must be >= 1, got {self.num_steps}")
        ab, sg = self.alpha_bar, self.sigma
        if ab.shape != (self.num_steps + 1,) or sg.shape != (self.num_steps + 1,):
            raise ShapeError("alpha_bar and sigma must have length num_steps + 1")
        if not (np.all(ab > 0) and np.all(ab <= 1)):
            raise RangeError("alpha_bar entries must lie in (0, 1]")
        if ab[0] < 0.999:
            raise RangeError(f"alpha_bar[0] must be >= 0.999, got {ab[0]}")
        if not np.all(np.diff(ab) < 0):
            raise RangeError("alpha_bar must be strictly decreasing")
        if sg[0] > 0.04:
            raise RangeError(f"sigma[0] must be <= 0.04, got {sg[0]}")
        if not np.all(np.diff(sg) > 0):
            raise RangeError("sigma must be strictly increasing")
        if np.max(np.abs(sg**2 * ab - (1 - ab))) > 1e-9:
            raise RangeError("sigma/alpha_bar consistency identity violated")
        ab.setflags(write=False)
        sg.setflags(write=False)

    def _check_t(self, t: int, lo: int = 1) -> None:
        if not lo <= t <= self.num_steps:
            raise RangeError(f"timestep {t} outside [{lo}, {self.num_steps}]")


def cosine_schedule(num_steps: int = 1000) -> NoiseSchedule:
    """Build a squared-cosine ``NoiseSchedule`` with T = ``num_steps``.

    Where the clamp floor would flatten consecutive tail entries (large T),
    the table applies tiny multiplicative decrements so alpha_bar stays
    strictly decreasing.
    """
    ab = np.array([cosine_alpha_bar(t, num_steps) for t in range(num_steps + 1)], dtype=np.float64)
    for t in range(1, num_steps + 1):
        if ab[t] >= ab[t - 1]:
            ab[t] = ab[t - 1] * (1.0 - 1e-9)
    sigma = np.sqrt((1.0 - ab) / ab)
    sigma[0] = 0.0  # alpha_bar[0] == 1 exactly
    return NoiseSchedule(num_steps=num_steps, alpha_bar=ab, sigma=sigma)


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


def q_sample(z0: torch.Tensor, t: int, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Forward-noise a clean latent: sqrt(a_bar_t) * z0 + sqrt(1 - a_bar_t) * eps."""
    _check_same_shape(z0, eps, "q_sample")
    sched._check_t(t)
    ab = float(sched.alpha_bar[t])
    return math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * eps


def one_step_denoise(
    z_t: torch.Tensor,
    eps_pred: torch.Tensor,
    t: int,
    sched: NoiseSchedule,
    mode: str = "exact",
) -> torch.Tensor:
    """Estimate the clean latent from (z_t, predicted noise) in a single step.

    mode="exact" inverts the forward-noising formula:
        (z_t - sqrt(1 - a_bar_t) * eps) / sqrt(a_bar_t).
    mode="paper" applies the preconditioned variant
        z_t / (sigma_t^2 + 1) - (sigma_t / sqrt(sigma_t^2 + 1)) * eps
    with sigma_t = sched.sigma[t]. The two agree only at sigma = 0; "exact"
    is what the pixel-space mirror loss consumes.
    """
    _check_same_shape(z_t, eps_pred, "one_step_denoise")
    sched._check_t(t)
    if mode == "exact":
        ab = float(sched.alpha_bar[t])
        return (z_t - math.sqrt(1.0 - ab) * eps_pred) / math.sqrt(ab)
    if mode == "paper":
        sg = float(sched.sigma[t])
        return z_t / (sg**2 + 1.0) - (sg / math.sqrt(sg**2 + 1.0)) * eps_pred
    raise RangeError(f"unknown mode {mode!r}; expected 'exact' or 'paper'")


def cfg_combine(eps_uncond: torch.Tensor, eps_cond: torch.Tensor, scale: float) -> torch.Tensor:
    """Classifier-free guidance blend: uncond + scale * (cond - uncond)."""
    _check_same_shape(eps_uncond, eps_cond, "cfg_combine")
    return eps_uncond + scale * (eps_cond - eps_uncond)


def ddim_step(
    z_t: torch.Tensor,
    eps_pred: torch.Tensor,
    t: int,
    t_prev: int,
    sched: NoiseSchedule,
) -> torch.Tensor:
    """Deterministic sampler update from timestep ``t`` down to ``t_prev``.

    Re-noises the exact-mode clean estimate to level t_prev with the same
    predicted noise (the eta = 0 update).
    """
    if t_prev >= t:
        raise OrderingError(f"t_prev ({t_prev}) must be < t ({t})")
    if not 0 <= t_prev:
        raise RangeError(f"t_prev ({t_prev}) must be >= 0")
    sched._check_t(t)
    x0 = one_step_denoise(z_t, eps_pred, t, sched, mode="exact")
    ab_prev = float(sched.alpha_bar[t_prev])
    return math.sqrt(ab_prev) * x0 + math.sqrt(1.0 - ab_prev) * eps_pred


def uniform_timesteps(num_steps: int, steps: int) -> list[int]:
    """Descending timestep sequence for ``steps`` uniformly spaced sampler
    updates over [0, num_steps], ending at 0. Duplicate rounded entries are
    dropped, so at most min(steps, num_steps) updates result."""
    if steps < 1:
        raise RangeError(f"steps must be >= 1, got {steps}")
    grid = np.round(np.linspace(0, num_steps, steps + 1)).astype(int)
    ts = sorted(set(grid.tolist()), reverse=True)
    return ts
