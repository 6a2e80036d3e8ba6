"""Evaluation metrics: counting accuracy and density-map quality.

Counts compare ground truth against predicted map sums (MAE / RMSE).
Map quality uses PSNR and SSIM after scaling both maps by the ground
truth peak, so the reference has dynamic range exactly 1.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, MetricError

PSNR_CAP_DB = 100.0
PSNR_MSE_FLOOR = 1e-10
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def mae(pairs) -> float:
    """Mean absolute count error over (gt_count, pred_count) pairs."""
    pairs = list(pairs)
    if not pairs:
        raise ConfigError("mae needs at least one (gt, pred) pair")
    arr = np.asarray(pairs, dtype=np.float64)
    return float(np.abs(arr[:, 0] - arr[:, 1]).mean())


def rmse(pairs) -> float:
    """Root mean squared count error over (gt_count, pred_count) pairs."""
    pairs = list(pairs)
    if not pairs:
        raise ConfigError("rmse needs at least one (gt, pred) pair")
    arr = np.asarray(pairs, dtype=np.float64)
    return float(np.sqrt(((arr[:, 0] - arr[:, 1]) ** 2).mean()))


def _scaled_pair(pred_map, gt_map, opname):
    pred = np.asarray(pred_map, dtype=np.float64)
    gt = np.asarray(gt_map, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ConfigError(f"{opname} shape mismatch: {pred.shape} vs {gt.shape}")
    peak = gt.max()
    if peak <= 0:
        raise MetricError(f"{opname} undefined for an all-zero ground truth map")
    return pred / peak, gt / peak


def psnr(pred_map, gt_map) -> float:
    """Peak signal-to-noise ratio in dB, capped at 100 for near-identical maps."""
    pred, gt = _scaled_pair(pred_map, gt_map, "psnr")
    mse = float(((pred - gt) ** 2).mean())
    if mse < PSNR_MSE_FLOOR:
        return PSNR_CAP_DB
    return float(10.0 * np.log10(1.0 / mse))


def _gaussian_window(size, sigma):
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax * ax) / (2.0 * sigma * sigma))
    k = g[:, None] * g[None, :]
    return k / k.sum()


def ssim(pred_map, gt_map) -> float:
    """Mean SSIM over valid 11x11 Gaussian windows (sigma 1.5, L = 1)."""
    pred, gt = _scaled_pair(pred_map, gt_map, "ssim")
    h, w = gt.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise MetricError(
            f"ssim needs maps of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )
    kern = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    win = np.lib.stride_tricks.sliding_window_view
    px = win(pred, (SSIM_WINDOW, SSIM_WINDOW))
    gx = win(gt, (SSIM_WINDOW, SSIM_WINDOW))
    mu_p = np.tensordot(px, kern, axes=((2, 3), (0, 1)))
    mu_g = np.tensordot(gx, kern, axes=((2, 3), (0, 1)))
    ep_p2 = np.tensordot(px * px, kern, axes=((2, 3), (0, 1)))
    ep_g2 = np.tensordot(gx * gx, kern, axes=((2, 3), (0, 1)))
    ep_pg = np.tensordot(px * gx, kern, axes=((2, 3), (0, 1)))
    var_p = ep_p2 - mu_p * mu_p
    var_g = ep_g2 - mu_g * mu_g
    cov = ep_pg - mu_p * mu_g
    c1 = SSIM_K1 * SSIM_K1
    c2 = SSIM_K2 * SSIM_K2
    num = (2.0 * mu_p * mu_g + c1) * (2.0 * cov + c2)
    den = (mu_p * mu_p + mu_g * mu_g + c1) * (var_p + var_g + c2)
    return float((num / den).mean())


@dataclass
class EvalReport:
    """Aggregate metrics plus per-image (gt, pred) counts.

    ``psnr``/``ssim`` are the stride-2 headline numbers; the ``_full``
    variants compare at source resolution.
    """

    mae: float
    rmse: float
    psnr: float
    ssim: float
    psnr_full: float = float("nan")
    ssim_full: float = float("nan")
    per_image: list = field(default_factory=list)  # (id, gt_count, pred_count)

    def __post_init__(self):
        if self.mae > self.rmse + 1e-9:
            raise ConfigError(f"mae {self.mae} exceeds rmse {self.rmse}")
        if np.isfinite(self.ssim) and not -1.0 - 1e-9 <= self.ssim <= 1.0 + 1e-9:
            raise ConfigError(f"ssim {self.ssim} outside [-1, 1]")

    def to_text(self) -> str:
        lines = [
            f"mae={self.mae!r}",
            f"rmse={self.rmse!r}",
            f"psnr={self.psnr!r}",
            f"ssim={self.ssim!r}",
            f"psnr_full={self.psnr_full!r}",
            f"ssim_full={self.ssim_full!r}",
            f"images={len(self.per_image)}",
        ]
        return "\n".join(lines) + "\n"

    def write(self, path, csv_path=None):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_text())
        if csv_path is not None:
            with open(csv_path, "w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh)
                writer.writerow(["id", "gt_count", "pred_count"])
                for image_id, gt_count, pred_count in self.per_image:
                    writer.writerow([image_id, repr(float(gt_count)), repr(float(pred_count))])
