"""Training losses: per-scale mask BCE plus density regression.

All losses are built from engine primitives, so their gradients come
from the tape with no hand-written backward here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import Tensor, add, clamp, elementwise_mul, log, sub, tmean, tsum
from .errors import ConfigError

BCE_CLAMP = 1e-7


@dataclass
class LossWeights:
    """Weights of the three attention losses; lambda1 pairs with the
    coarsest (stride-8) scale."""

    lambda1: float = 1e-2
    lambda2: float = 1e-3
    lambda3: float = 1e-4

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ConfigError("loss weights must be nonnegative")

    def as_tuple(self):
        return (self.lambda1, self.lambda2, self.lambda3)


def _as_tensor(t, dtype):
    if isinstance(t, Tensor):
        return t
    return Tensor(np.asarray(t, dtype=dtype))


def bce_loss(pred: Tensor, target) -> Tensor:
    """Mean binary cross-entropy over all pixels and batch entries.

    Predictions are clamped to [1e-7, 1-1e-7] so saturated sigmoids
    cannot produce log(0).
    """
    target = _as_tensor(target, pred.dtype)
    if pred.shape != target.shape:
        raise ConfigError(f"bce_loss shape mismatch: {pred.shape} vs {target.shape}")
    p = clamp(pred, BCE_CLAMP, 1.0 - BCE_CLAMP)
    one_minus_p = add(elementwise_mul(p, -1.0), 1.0)
    pos = elementwise_mul(log(p), target)
    neg = elementwise_mul(log(one_minus_p), add(elementwise_mul(target, -1.0), 1.0))
    return elementwise_mul(tmean(add(pos, neg)), -1.0)


def density_loss(pred: Tensor, gt, divisor: float | None = None) -> Tensor:
    """Summed squared L2 distance between density maps.

    By default the sum is divided by 2N (N = batch size) so the loss
    magnitude does not scale with batch size; pass an explicit divisor
    to override (1.0 gives the bare sum).
    """
    gt = _as_tensor(gt, pred.dtype)
    if pred.shape != gt.shape:
        raise ConfigError(f"density_loss shape mismatch: {pred.shape} vs {gt.shape}")
    if divisor is None:
        divisor = 2.0 * pred.shape[0]
    if divisor <= 0:
        raise ConfigError(f"density_loss divisor must be > 0, got {divisor}")
    diff = sub(pred, gt)
    return elementwise_mul(tsum(elementwise_mul(diff, diff)), 1.0 / divisor)


def combined_loss(density_pair, att_pairs, weights: LossWeights,
                  den_divisor: float | None = None):
    """Weighted sum of three attention losses and the density loss.

    ``att_pairs`` holds (pred, gt_mask) at strides 8, 4, 2 in that
    order, matching lambda1..lambda3.  Returns the total loss tensor and
    a dict of the four component values.
    """
    att_pairs = list(att_pairs)
    if len(att_pairs) != 3:
        raise ConfigError(f"combined_loss expects 3 attention pairs, got {len(att_pairs)}")
    den = density_loss(density_pair[0], density_pair[1], divisor=den_divisor)
    total = den
    components = {"den": den.item()}
    for i, ((pred, gt), lam) in enumerate(zip(att_pairs, weights.as_tuple()), start=1):
        att = bce_loss(pred, gt)
        components[f"att{i}"] = att.item()
        total = add(total, elementwise_mul(att, lam))
    components["total"] = total.item()
    return total, components
