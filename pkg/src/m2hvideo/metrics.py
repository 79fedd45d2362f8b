"""Evaluation metrics: masked PSNR/SSIM, masked perceptual distance, face
embedding cosine similarity, and Fréchet distance between video-embedding
sets, plus the report structure they aggregate into.

Absolute Fréchet values are only comparable under a fixed embedder; reports
record the embedder identity for that reason.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.ndimage import convolve

from .errors import MetricError, NumericError, ShapeError

PSNR_CAP_DB = 99.0
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def _check_video_pair(a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"video shapes differ: {a.shape} vs {b.shape}")
    if a.ndim != 4 or a.shape[1] != 3:
        raise ShapeError(f"videos must be [N, 3, H, W], got {a.shape}")
    if mask.shape != (a.shape[0], 1, a.shape[2], a.shape[3]):
        raise ShapeError(f"mask shape {mask.shape} does not match videos {a.shape}")


def masked_psnr(a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> float:
    """PSNR in dB over masked pixels (unit dynamic range), capped at 99.0."""
    _check_video_pair(a, b, mask)
    weight = np.broadcast_to(mask, a.shape)
    total = weight.sum()
    if total == 0:
        raise MetricError("empty mask")
    mse = float((((a - b) ** 2) * weight).sum() / total)
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP_DB)


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = size // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(x**2) / (2 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


_SSIM_KERNEL = _gaussian_kernel()


def _ssim_map(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-pixel SSIM of two [H, W] planes (11x11 Gaussian window, sigma 1.5,
    reflect boundary)."""
    conv = lambda x: convolve(x, _SSIM_KERNEL, mode="reflect")  # noqa: E731
    mu_a, mu_b = conv(a), conv(b)
    var_a = conv(a * a) - mu_a**2
    var_b = conv(b * b) - mu_b**2
    cov = conv(a * b) - mu_a * mu_b
    return ((2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)) / (
        (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2))


def masked_ssim(a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> float:
    """Mean windowed SSIM over windows whose center lies inside the mask."""
    _check_video_pair(a, b, mask)
    centers = mask[:, 0] > 0.5
    if not centers.any():
        raise MetricError("empty mask")
    values, count = 0.0, 0
    for n in range(a.shape[0]):
        if not centers[n].any():
            continue
        per_pixel = np.mean(
            [_ssim_map(a[n, c].astype(np.float64), b[n, c].astype(np.float64))
             for c in range(3)], axis=0)
        values += per_pixel[centers[n]].sum()
        count += int(centers[n].sum())
    return float(values / count)


def perceptual_distance(a: np.ndarray, b: np.ndarray, mask: np.ndarray, perceptual) -> float:
    """Mean squared feature distance across the extractor's layers on
    mask-multiplied inputs; lower is better."""
    _check_video_pair(a, b, mask)
    with torch.no_grad():
        ta = torch.from_numpy((a * mask).astype(np.float32))
        tb = torch.from_numpy((b * mask).astype(np.float32))
        feats_a, feats_b = perceptual(ta), perceptual(tb)
        dist = sum(torch.mean((fa - fb) ** 2).item() for fa, fb in zip(feats_a, feats_b))
    return float(dist / len(feats_a))


def csim(e1, e2) -> float:
    """Cosine similarity between two embedding vectors."""
    v1 = np.asarray(e1, dtype=np.float64).ravel()
    v2 = np.asarray(e2, dtype=np.float64).ravel()
    if v1.shape != v2.shape:
        raise ShapeError(f"embedding dims differ: {v1.shape} vs {v2.shape}")
    n1, n2 = np.linalg.norm(v1), np.linalg.norm(v2)
    if n1 == 0.0 or n2 == 0.0:
        raise MetricError("zero-norm embedding")
    return float(np.dot(v1, v2) / (n1 * n2))


def frechet_distance(mu1: np.ndarray, cov1: np.ndarray,
                     mu2: np.ndarray, cov2: np.ndarray) -> float:
    """Fréchet distance between two Gaussians.

    The covariance-product square root is taken on the symmetrized product;
    eigenvalues in (-1e-6, 0) are clamped to zero, anything more negative is
    a numeric error.
    """
    mu1, mu2 = np.asarray(mu1, dtype=np.float64), np.asarray(mu2, dtype=np.float64)
    cov1, cov2 = np.asarray(cov1, dtype=np.float64), np.asarray(cov2, dtype=np.float64)
    if mu1.shape != mu2.shape or cov1.shape != cov2.shape or cov1.shape != (mu1.size, mu1.size):
        raise ShapeError("mean/covariance dimensions do not agree")
    product = cov1 @ cov2
    sym = (product + product.T) / 2.0
    eigvals, eigvecs = np.linalg.eigh(sym)
    if eigvals.min() < -1e-6:
        raise NumericError(
            f"covariance product is indefinite (min eigenvalue {eigvals.min():.3e})")
    eigvals = np.clip(eigvals, 0.0, None)
    sqrt_trace = float(np.sqrt(eigvals).sum())
    del eigvecs
    value = float(np.sum((mu1 - mu2) ** 2) + np.trace(cov1) + np.trace(cov2) - 2.0 * sqrt_trace)
    return max(value, 0.0)


def fvd(set_a: list[np.ndarray], set_b: list[np.ndarray], embedder) -> float:
    """Fréchet distance between Gaussian fits of the two videos' embedding
    sets. ``embedder`` maps one video [N, 3, H, W] to a fixed-length vector;
    each set needs at least two videos for the (unbiased) covariance."""
    if len(set_a) < 2 or len(set_b) < 2:
        raise MetricError("each set needs >= 2 videos to estimate a covariance")
    emb_a = np.stack([np.asarray(embedder(v), dtype=np.float64) for v in set_a])
    emb_b = np.stack([np.asarray(embedder(v), dtype=np.float64) for v in set_b])
    return frechet_distance(
        emb_a.mean(axis=0), np.cov(emb_a, rowvar=False),
        emb_b.mean(axis=0), np.cov(emb_b, rowvar=False))


def clothing_video_embedder(clothing_embedder):
    """Default video embedder: clothing-token features mean-pooled over
    frames and tokens."""

    def embed(video: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            tokens = clothing_embedder(torch.from_numpy(video.astype(np.float32)))
        return tokens.mean(dim=(0, 1)).numpy()

    return embed


# ---------------------------------------------------------------------------
# report structure

@dataclass
class SampleMetrics:
    sample_id: str
    psnr_db: float
    ssim: float
    perceptual: float
    csim: float

    def to_json_obj(self) -> dict:
        return {"sample_id": self.sample_id, "psnr_db": self.psnr_db, "ssim": self.ssim,
                "perceptual": self.perceptual, "csim": self.csim}


@dataclass
class EvalReport:
    mask_scope: str                        # "clothing_region" or "full_frame"
    per_sample: list[SampleMetrics] = field(default_factory=list)
    fvd: float | None = None
    embedder_ref: str = ""

    def aggregate(self) -> dict:
        agg = {}
        for key in ("psnr_db", "ssim", "perceptual", "csim"):
            vals = [getattr(s, key) for s in self.per_sample]
            agg[key] = float(np.mean(vals)) if vals else float("nan")
        agg["fvd"] = self.fvd
        return agg

    def to_json_obj(self) -> dict:
        return {
            "mask_scope": self.mask_scope,
            "embedder_ref": self.embedder_ref,
            "per_sample": [s.to_json_obj() for s in self.per_sample],
            "aggregate": self.aggregate(),
        }

    def csv_row(self, method: str = "m2hvideo") -> tuple[str, str]:
        """(header, row) pair for the per-method summary table."""
        agg = self.aggregate()
        header = "method,psnr_db,ssim,perceptual,csim,fvd"
        fvd_s = "" if agg["fvd"] is None else f"{agg['fvd']:.6f}"
        row = (f"{method},{agg['psnr_db']:.4f},{agg['ssim']:.6f},"
               f"{agg['perceptual']:.6f},{agg['csim']:.6f},{fvd_s}")
        return header, row
