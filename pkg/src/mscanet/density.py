"""Ground-truth density maps and thresholded attention masks.

Head annotations become density maps by placing one truncated,
unit-normalized Gaussian per head; the map's sum then approximates the
head count (exactly, away from image borders).  Binary foreground masks
are thresholded density, downscaled by block max so thin foreground
survives at the coarsest scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError

# Threshold comparison direction: foreground where density >= t.  The
# inverted direction exists in the wild; flip this single constant to
# study it.
FOREGROUND_IS_HIGH_DENSITY = True

# Geometry-adaptive kernel defaults: sigma_i = BETA * mean distance to
# the K nearest annotated neighbors, floored at 1 px.  Scenes with fewer
# than two heads have no neighbor distance and fall back to a fixed
# sigma.
ADAPTIVE_BETA = 0.3
ADAPTIVE_K = 3
FALLBACK_SIGMA = 15.0
SIGMA_FLOOR = 1.0
MASK_THRESHOLD = 1e-4


@dataclass
class DensityMap:
    """Nonnegative people-per-pixel map at some stride of the source image."""

    values: np.ndarray
    stride: int = 1

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ConfigError(f"density map must be 2-d, got shape {self.values.shape}")

    def total(self) -> float:
        return float(self.values.sum())


@dataclass
class AttentionMask:
    """Binary foreground mask at some stride of the source image."""

    values: np.ndarray
    stride: int = 1

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ConfigError(f"mask must be 2-d, got shape {self.values.shape}")


def knn_mean_distance(points, k: int):
    """Mean Euclidean distance from each point to its k nearest others.

    Points with fewer than k neighbors average over those available; a
    point with no neighbors at all gets nan (callers fall back to a
    fixed kernel width).
    """
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n = len(pts)
    if n == 0:
        return np.zeros(0, dtype=np.float64)
    if n == 1:
        return np.full(1, np.nan)
    diff = pts[:, None, :] - pts[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=2))
    np.fill_diagonal(dist, np.inf)
    kk = min(k, n - 1)
    nearest = np.sort(dist, axis=1)[:, :kk]
    return nearest.mean(axis=1)


def _add_gaussian(acc: np.ndarray, x: float, y: float, sigma: float):
    """Stamp one truncated Gaussian, unit-normalized before border clipping."""
    h, w = acc.shape
    r = int(math.ceil(3.0 * sigma))
    cx = int(math.floor(x + 0.5))
    cy = int(math.floor(y + 0.5))
    xs = np.arange(cx - r, cx + r + 1, dtype=np.float64)
    ys = np.arange(cy - r, cy + r + 1, dtype=np.float64)
    gx = np.exp(-((xs - x) ** 2) / (2.0 * sigma * sigma))
    gy = np.exp(-((ys - y) ** 2) / (2.0 * sigma * sigma))
    kern = gy[:, None] * gx[None, :]
    kern /= kern.sum()
    x0, x1 = max(0, cx - r), min(w, cx + r + 1)
    y0, y1 = max(0, cy - r), min(h, cy + r + 1)
    if x0 >= x1 or y0 >= y1:
        return
    acc[y0:y1, x0:x1] += kern[y0 - (cy - r) : y1 - (cy - r), x0 - (cx - r) : x1 - (cx - r)]


def _validate_points(points, width, height):
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) and (
        (pts[:, 0] < 0).any()
        or (pts[:, 0] >= width).any()
        or (pts[:, 1] < 0).any()
        or (pts[:, 1] >= height).any()
    ):
        raise InputError("head point outside [0,W)x[0,H)")
    return pts


def density_from_points(points, width: int, height: int, sigmas) -> DensityMap:
    """Sum of per-head Gaussians with the given per-head sigmas."""
    pts = _validate_points(points, width, height)
    acc = np.zeros((height, width), dtype=np.float64)
    for (x, y), sigma in zip(pts, np.broadcast_to(sigmas, (len(pts),))):
        _add_gaussian(acc, x, y, max(float(sigma), SIGMA_FLOOR))
    return DensityMap(acc, stride=1)


def adaptive_density(scene, beta: float = ADAPTIVE_BETA, k: int = ADAPTIVE_K,
                     fallback_sigma: float = FALLBACK_SIGMA) -> DensityMap:
    """Geometry-adaptive density map: sigma_i = beta * d_i (K nearest)."""
    if beta <= 0:
        raise ConfigError(f"beta must be > 0, got {beta}")
    pts = np.asarray(scene.points, dtype=np.float64).reshape(-1, 2)
    if len(pts) < 2:
        sigmas = np.full(len(pts), fallback_sigma)
    else:
        sigmas = beta * knn_mean_distance(pts, k)
    return density_from_points(pts, scene.width, scene.height, sigmas)


def fixed_density(scene, sigma: float) -> DensityMap:
    """Density map with one constant kernel width for every head."""
    if sigma <= 0:
        raise ConfigError(f"sigma must be > 0, got {sigma}")
    pts = np.asarray(scene.points, dtype=np.float64).reshape(-1, 2)
    return density_from_points(pts, scene.width, scene.height, np.full(len(pts), sigma))


def attention_mask(density: DensityMap, t: float = MASK_THRESHOLD) -> AttentionMask:
    """Binary foreground mask from a density map."""
    if t <= 0:
        raise ConfigError(f"threshold must be > 0, got {t}")
    if FOREGROUND_IS_HIGH_DENSITY:
        vals = (density.values >= t).astype(np.float64)
    else:
        vals = (density.values <= t).astype(np.float64)
    return AttentionMask(vals, stride=density.stride)


def _check_divisible(shape, factor):
    h, w = shape
    if h % factor or w % factor:
        raise ConfigError(f"dims {h}x{w} not divisible by factor {factor}")


def downscale_density(density: DensityMap, factor: int) -> DensityMap:
    """Block-sum downscale; the total count is preserved exactly."""
    _check_divisible(density.values.shape, factor)
    h, w = density.values.shape
    v = density.values.reshape(h // factor, factor, w // factor, factor).sum(axis=(1, 3))
    return DensityMap(v, stride=density.stride * factor)


def downscale_mask(mask: AttentionMask, factor: int) -> AttentionMask:
    """Block-max downscale; a cell is foreground if any covered pixel is."""
    _check_divisible(mask.values.shape, factor)
    h, w = mask.values.shape
    v = mask.values.reshape(h // factor, factor, w // factor, factor).max(axis=(1, 3))
    return AttentionMask(v, stride=mask.stride * factor)


def block_upsample(values: np.ndarray, factor: int) -> np.ndarray:
    """Sum-preserving inverse of block-sum: spread each cell over a block."""
    v = np.asarray(values, dtype=np.float64) / float(factor * factor)
    return np.repeat(np.repeat(v, factor, axis=0), factor, axis=1)


@dataclass
class GroundTruth:
    """Full-resolution density plus the mask pyramid used for supervision."""

    density: DensityMap
    masks: dict = field(default_factory=dict)  # stride -> AttentionMask


def build_ground_truth(scene, sigma=None, beta=ADAPTIVE_BETA, k=ADAPTIVE_K,
                       mask_strides=(2, 4, 8), threshold=MASK_THRESHOLD) -> GroundTruth:
    """Density map (fixed sigma if given, else adaptive) and its mask pyramid."""
    if sigma is not None:
        den = fixed_density(scene, sigma)
    else:
        den = adaptive_density(scene, beta=beta, k=k)
    full_mask = attention_mask(den, threshold)
    masks = {s: downscale_mask(full_mask, s) for s in mask_strides}
    return GroundTruth(density=den, masks=masks)
