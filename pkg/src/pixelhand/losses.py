"""Training losses for the per-pixel maps: dice overlap on scores, cosine distance
on rotations, log-IoU on side distances, with closed-form gradients.

The rotation and distance terms only make sense where a box exists, so they
average over score-positive pixels; the dice term sees every pixel. Each loss
returns (value, gradient) with the gradient taken with respect to the
prediction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .geometry import GeometryMaps
from .tensor import Tensor


@dataclass(frozen=True)
class LossWeights:
    """Term and scale weights. alpha scales the score term, beta the rotation term."""

    alpha: float = 0.01
    beta: float = 20.0
    w_s: tuple = (1.0, 1.0, 1.0, 1.0)
    eps0: float = 1e-5
    eps1: float = 1e-5

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or any(w < 0 for w in self.w_s):
            raise ConfigError("loss weights must be non-negative")
        if self.eps0 <= 0 or self.eps1 <= 0:
            raise ConfigError("smoothing constants must be positive")


@dataclass(frozen=True)
class ScaleLoss:
    """Loss terms for one cascade scale."""

    l_sco: float
    l_rot: float
    l_dis: float
    l_s: float


@dataclass(frozen=True)
class LossBreakdown:
    scales: tuple
    total: float


def _require_same_shape(a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ConfigError(f"shape mismatch: {a.shape} vs {b.shape}")


def dice_loss(pred: Tensor, truth: Tensor, eps0: float = 1e-5):
    """1 - (2*sum(p*g) + eps0) / (sum(p^2) + sum(g^2) + eps0) over all pixels."""
    _require_same_shape(pred, truth)
    p = pred.data
    g = truth.data
    num = 2.0 * float((p * g).sum()) + eps0
    den = float((p * p).sum()) + float((g * g).sum()) + eps0
    loss = 1.0 - num / den
    grad = (2.0 * p * num - 2.0 * g * den) / (den * den)
    return loss, Tensor(grad)


def _positive_mask(shape_hw, positive):
    if positive is None:
        return np.ones(shape_hw, dtype=bool)
    mask = np.asarray(positive)
    if mask.shape != shape_hw:
        raise ConfigError(f"mask shape {mask.shape} does not match maps {shape_hw}")
    return mask.astype(bool)


def rotation_loss(pred_theta: Tensor, truth_theta: Tensor, positive=None):
    """1 - mean cos(pred - truth) over positive pixels; empty positive set gives 0."""
    _require_same_shape(pred_theta, truth_theta)
    mask = _positive_mask(pred_theta.data.shape[1:], positive)
    n = int(mask.sum())
    grad = np.zeros_like(pred_theta.data)
    if n == 0:
        return 0.0, Tensor(grad)
    diff = pred_theta.data[:, mask] - truth_theta.data[:, mask]
    loss = 1.0 - float(np.cos(diff).mean())
    grad[:, mask] = np.sin(diff) / n
    return loss, Tensor(grad)


def iou_loss(pred_dist: Tensor, truth_dist: Tensor, eps1: float = 1e-5, positive=None):
    """Mean -log((I + eps1)/(U + eps1)) over positive pixels.

    Per pixel, with distances (t, r, b, l) to the four sides:
      I = (min(d_t, p_t) + min(d_b, p_b)) * (min(d_l, p_l) + min(d_r, p_r))
      U = truth area + predicted area - I.
    At min ties the subgradient follows the predicted branch.
    """
    _require_same_shape(pred_dist, truth_dist)
    if pred_dist.channels != 4:
        raise ConfigError(f"distance maps need 4 channels, got {pred_dist.channels}")
    mask = _positive_mask(pred_dist.data.shape[1:], positive)
    n = int(mask.sum())
    grad = np.zeros_like(pred_dist.data)
    if n == 0:
        return 0.0, Tensor(grad)
    p = pred_dist.data[:, mask]
    g = truth_dist.data[:, mask]
    pt, pr, pb, pl = p
    gt, gr, gb, gl = g
    ih = np.minimum(gt, pt) + np.minimum(gb, pb)
    iw = np.minimum(gl, pl) + np.minimum(gr, pr)
    inter = ih * iw
    area_g = (gt + gb) * (gl + gr)
    area_p = (pt + pb) * (pl + pr)
    union = area_g + area_p - inter
    loss = float((np.log(union + eps1) - np.log(inter + eps1)).mean())

    # d(min(g, p))/dp is 1 on the predicted branch (p <= g), else 0.
    sel_t = (pt <= gt).astype(np.float64)
    sel_r = (pr <= gr).astype(np.float64)
    sel_b = (pb <= gb).astype(np.float64)
    sel_l = (pl <= gl).astype(np.float64)
    d_inter = np.stack([iw * sel_t, ih * sel_r, iw * sel_b, ih * sel_l])
    d_area = np.stack([pl + pr, pt + pb, pl + pr, pt + pb])
    d_union = d_area - d_inter
    d_term = d_union / (union + eps1) - d_inter / (inter + eps1)
    grad[:, mask] = d_term / n
    return loss, Tensor(grad)


def scale_loss(maps_pred: GeometryMaps, maps_truth: GeometryMaps, weights: LossWeights) -> ScaleLoss:
    """Combine the three terms for one scale: alpha*score + beta*rotation + distance."""
    positive = maps_truth.score.data[0] > 0.5
    l_sco, _ = dice_loss(maps_pred.score, maps_truth.score, weights.eps0)
    l_rot, _ = rotation_loss(maps_pred.rotation, maps_truth.rotation, positive)
    l_dis, _ = iou_loss(maps_pred.distance, maps_truth.distance, weights.eps1, positive)
    l_s = weights.alpha * l_sco + weights.beta * l_rot + l_dis
    return ScaleLoss(l_sco, l_rot, l_dis, l_s)


def total_loss(per_scale, weights: LossWeights) -> float:
    """Weighted sum over 1-4 scales, scale i paired with w_s[i]."""
    scales = list(per_scale)
    if not 1 <= len(scales) <= 4:
        raise ConfigError(f"need 1-4 scales, got {len(scales)}")
    if len(scales) > len(weights.w_s):
        raise ConfigError(f"{len(scales)} scales but only {len(weights.w_s)} scale weights")
    total = 0.0
    for i, entry in enumerate(scales):
        l_s = entry.l_s if isinstance(entry, ScaleLoss) else float(entry)
        total += weights.w_s[i] * l_s
    return total


def breakdown(map_pairs, weights: LossWeights) -> LossBreakdown:
    """Full per-scale breakdown for a list of (pred, truth) GeometryMaps pairs."""
    scales = tuple(scale_loss(pred, truth, weights) for pred, truth in map_pairs)
    return LossBreakdown(scales, total_loss(scales, weights))
