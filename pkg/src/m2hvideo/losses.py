"""Training losses: latent noise-prediction error, the pixel-space mirror
loss on the one-step-denoised decode (masked L2 plus masked perceptual
term), and their sum.

Reduction convention: each frame term is a per-element mean, then frame terms
are summed. This keeps the weighting coefficients resolution-independent
(see README for the exact normalization).
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .encoders import DEFAULT_PERCEPTUAL_LAYERS
from .errors import NumericError, ShapeError


@dataclass(frozen=True)
class LossWeights:
    """Mirror-loss weighting; alpha scales the pixel term, beta the
    perceptual term."""

    alpha: float = 0.05
    beta: float = 0.001
    layer_names: tuple[str, ...] = DEFAULT_PERCEPTUAL_LAYERS

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ShapeError("loss weights must be non-negative")


# running-text default; the ablation's best cell is shipped as a preset
DEFAULT_WEIGHTS = LossWeights(alpha=0.05, beta=0.001)
ABLATION_BEST_WEIGHTS = LossWeights(alpha=0.05, beta=0.005)

PRESET_WEIGHTS = {"default": DEFAULT_WEIGHTS, "ablation_best": ABLATION_BEST_WEIGHTS}


def diffusion_loss(eps_true: torch.Tensor, eps_pred: torch.Tensor) -> torch.Tensor:
    """Mean squared error between true and predicted noise."""
    if eps_true.shape != eps_pred.shape:
        raise ShapeError(
            f"diffusion_loss: shapes {tuple(eps_true.shape)} vs {tuple(eps_pred.shape)}")
    return torch.mean((eps_true - eps_pred) ** 2)


def mirror_loss(v_h: torch.Tensor, v_g: torch.Tensor, face_mask: torch.Tensor,
                weights: LossWeights, perceptual) -> torch.Tensor:
    """Face-masked pixel + perceptual discrepancy between the ground-truth
    and the one-step-decoded video, both [N, 3, H, W]; mask is [N, 1, H, W]
    with entries in [0, 1] and multiplies the inputs before the perceptual
    extractor."""
    if v_h.shape != v_g.shape:
        raise ShapeError(f"mirror_loss: shapes {tuple(v_h.shape)} vs {tuple(v_g.shape)}")
    if face_mask.shape != (v_h.shape[0], 1, v_h.shape[2], v_h.shape[3]):
        raise ShapeError(
            f"mirror_loss: mask shape {tuple(face_mask.shape)} does not match the videos")

    total = v_h.new_zeros(())
    if weights.alpha > 0:
        pixel = torch.mean(((v_h - v_g) * face_mask) ** 2, dim=(1, 2, 3)).sum()
        total = total + weights.alpha * pixel
    if weights.beta > 0:
        feats_h = perceptual(v_h * face_mask)
        feats_g = perceptual(v_g * face_mask)
        perc = v_h.new_zeros(())
        for fh, fg in zip(feats_h, feats_g):
            perc = perc + torch.mean((fh - fg) ** 2, dim=(1, 2, 3)).sum()
        total = total + weights.beta * perc
    return total


def total_loss(l_diff: torch.Tensor, l_mir: torch.Tensor) -> torch.Tensor:
    """Sum of the latent diffusion loss and the mirror loss."""
    combined = l_diff + l_mir
    if not torch.isfinite(combined):
        raise NumericError(f"non-finite loss: diffusion={l_diff}, mirror={l_mir}")
    return combined
