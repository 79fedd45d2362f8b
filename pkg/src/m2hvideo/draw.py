"""Anti-aliased rasterization primitives shared by the synthetic generator
and the pose-map renderer. All return coverage maps in [0, 1]."""
from __future__ import annotations

import numpy as np


def disk_alpha(h: int, w: int, cx: float, cy: float, radius: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    dist = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2)
    return np.clip(radius + 0.5 - dist, 0.0, 1.0)


def segment_alpha(h: int, w: int, p0, p1, half_width: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    px, py = p1[0] - p0[0], p1[1] - p0[1]
    norm = px * px + py * py
    if norm < 1e-12:
        return disk_alpha(h, w, p0[0], p0[1], half_width)
    t = np.clip(((xx - p0[0]) * px + (yy - p0[1]) * py) / norm, 0.0, 1.0)
    dist = np.sqrt((xx - (p0[0] + t * px)) ** 2 + (yy - (p0[1] + t * py)) ** 2)
    return np.clip(half_width + 0.5 - dist, 0.0, 1.0)


def over(canvas: np.ndarray, alpha: np.ndarray, color) -> None:
    """Alpha-composite a flat color onto [3, H, W] in place."""
    for c in range(3):
        canvas[c] = canvas[c] * (1 - alpha) + color[c] * alpha


def max_blend(canvas: np.ndarray, alpha: np.ndarray, color) -> None:
    """Per-channel max composite (order-independent) onto [3, H, W] in place."""
    for c in range(3):
        np.maximum(canvas[c], alpha * color[c], out=canvas[c])
