"""Separable bilinear resampling on 2-D grids of channel vectors."""

from __future__ import annotations

import numpy as np


def bilinear_weights(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic (n_out, n_in) matrix for 1-D linear resampling.

    Half-pixel centres with edge clamping, the same convention as
    ``torch.nn.functional.interpolate(mode="bilinear", align_corners=False)``.
    """
    if n_in < 1 or n_out < 1:
        raise ValueError(f"sizes must be positive, got {n_in} -> {n_out}")
    weights = np.zeros((n_out, n_in), dtype=np.float64)
    if n_in == n_out:
        np.fill_diagonal(weights, 1.0)
        return weights
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    rows = np.arange(n_out)
    np.add.at(weights, (rows, lo), 1.0 - frac)
    np.add.at(weights, (rows, hi), frac)
    return weights


def resize_bilinear(grid: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Resample an (H, W, C) or (H, W) array to ``out_hw``, channel by channel."""
    squeeze = grid.ndim == 2
    if squeeze:
        grid = grid[:, :, None]
    if grid.ndim != 3:
        raise ValueError(f"expected (H, W, C) grid, got shape {grid.shape}")
    h, w = grid.shape[:2]
    oh, ow = out_hw
    if (h, w) == (oh, ow):
        out = np.asarray(grid, dtype=np.float64).copy()
    else:
        wh = bilinear_weights(h, oh)
        ww = bilinear_weights(w, ow)
        out = np.einsum("ah,hwc,bw->abc", wh, np.asarray(grid, dtype=np.float64), ww, optimize=True)
    return out[:, :, 0] if squeeze else out


def resize_nearest(labels: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resize of a 2-D integer map (half-pixel centres)."""
    h, w = labels.shape[:2]
    oh, ow = out_hw
    if (h, w) == (oh, ow):
        return labels.copy()
    ys = np.minimum(((np.arange(oh) + 0.5) * h / oh).astype(np.int64), h - 1)
    xs = np.minimum(((np.arange(ow) + 0.5) * w / ow).astype(np.int64), w - 1)
    return labels[ys[:, None], xs[None, :]]
