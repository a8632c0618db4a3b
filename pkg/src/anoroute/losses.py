"""Training objective: focal + dice segmentation, global CE, routing MSE.

All terms are computed per image at patch-grid resolution and averaged over
the batch; ``loss_gradients`` seeds the prediction-space derivatives and
drives the exact backward through fusion, adapters, routing and projection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .fusion_scorer import ImageCache, ModelParams, backward_image


@dataclass
class LossWeights:
    """Objective weights and the fixed focal/dice/clamp constants."""

    lambda1: float = 0.5   # segmentation (focal + dice)
    lambda2: float = 0.25  # global cross-entropy
    lambda3: float = 0.1   # routing regularizer
    gamma_focal: float = 2.0
    alpha_focal: float = 0.25
    eps_dice: float = 1.0
    p_clamp: float = 1e-6


@dataclass
class LossBreakdown:
    focal: float
    dice: float
    seg: float
    global_: float
    routing: float
    total: float


def _check_pair(p: np.ndarray, m: np.ndarray) -> None:
    if p.shape != m.shape:
        raise ValueError(f"prediction {p.shape} and mask {m.shape} shapes differ")
    if not np.isin(m, (0, 1)).all():
        raise ValueError("mask must be binary")


def focal_loss(
    p: np.ndarray, m: np.ndarray, gamma: float = 2.0, alpha: float = 0.25, p_clamp: float = 1e-6
) -> float:
    """Mean over pixels of the alpha-balanced focal term, with clamped probs."""
    _check_pair(p, m)
    pc = np.clip(p, p_clamp, 1.0 - p_clamp)
    m = m.astype(np.float64)
    pos = -alpha * m * (1.0 - pc) ** gamma * np.log(pc)
    neg = -(1.0 - alpha) * (1.0 - m) * pc**gamma * np.log(1.0 - pc)
    return float(np.mean(pos + neg))


def focal_grad(
    p: np.ndarray, m: np.ndarray, gamma: float = 2.0, alpha: float = 0.25, p_clamp: float = 1e-6
) -> np.ndarray:
    """d focal / d p per pixel; zero where the clamp is active."""
    _check_pair(p, m)
    pc = np.clip(p, p_clamp, 1.0 - p_clamp)
    m = m.astype(np.float64)
    d_pos = alpha * (gamma * (1.0 - pc) ** (gamma - 1.0) * np.log(pc) - (1.0 - pc) ** gamma / pc)
    d_neg = (1.0 - alpha) * (pc**gamma / (1.0 - pc) - gamma * pc ** (gamma - 1.0) * np.log(1.0 - pc))
    grad = (m * d_pos + (1.0 - m) * d_neg) / p.size
    inside = (p > p_clamp) & (p < 1.0 - p_clamp)
    return np.where(inside, grad, 0.0)


def dice_loss(p: np.ndarray, m: np.ndarray, eps: float = 1.0) -> float:
    """1 - (2 * overlap + eps) / (sum(p) + sum(m) + eps)."""
    if p.shape != m.shape:
        raise ValueError(f"prediction {p.shape} and mask {m.shape} shapes differ")
    m = m.astype(np.float64)
    num = 2.0 * float(np.sum(p * m)) + eps
    den = float(np.sum(p)) + float(np.sum(m)) + eps
    return 1.0 - num / den


def dice_grad(p: np.ndarray, m: np.ndarray, eps: float = 1.0) -> np.ndarray:
    m = m.astype(np.float64)
    num = 2.0 * float(np.sum(p * m)) + eps
    den = float(np.sum(p)) + float(np.sum(m)) + eps
    return (num - 2.0 * m * den) / (den * den)


def routing_loss(w_normal: float, w_anomaly: float, y: int) -> float:
    """Squared error pushing the weights toward (1 - y, y)."""
    return (w_normal - (1.0 - y)) ** 2 + (w_anomaly - y) ** 2


def routing_grad(w_normal: float, w_anomaly: float, y: int) -> tuple[float, float]:
    return 2.0 * (w_normal - (1.0 - y)), 2.0 * (w_anomaly - y)


def global_loss(s: float, y: int, p_clamp: float = 1e-6) -> float:
    """Binary cross-entropy on the clamped global anomaly score."""
    sc = min(max(s, p_clamp), 1.0 - p_clamp)
    return -y * np.log(sc) - (1 - y) * np.log(1.0 - sc)


def global_grad(s: float, y: int, p_clamp: float = 1e-6) -> float:
    if s <= p_clamp or s >= 1.0 - p_clamp:
        return 0.0
    return -y / s + (1 - y) / (1.0 - s)


def total_loss(
    focal: float, dice: float, global_: float, routing: float, weights: LossWeights
) -> LossBreakdown:
    """Weighted sum; seg = focal + dice by construction."""
    seg = focal + dice
    total = weights.lambda1 * seg + weights.lambda2 * global_ + weights.lambda3 * routing
    return LossBreakdown(
        focal=focal, dice=dice, seg=seg, global_=global_, routing=routing, total=total
    )


def image_loss_terms(cache: ImageCache, weights: LossWeights) -> tuple[float, float, float, float]:
    """(focal, dice, global, routing) for one forwarded image."""
    mask = cache.mask_grid
    focal = focal_loss(cache.grid, mask, weights.gamma_focal, weights.alpha_focal, weights.p_clamp)
    dice = dice_loss(cache.grid, mask, weights.eps_dice)
    glob = float(global_loss(cache.s_anomaly, cache.label, weights.p_clamp))
    rout = routing_loss(cache.decision.w_normal, cache.decision.w_anomaly, cache.label)
    return focal, dice, glob, rout


def image_loss_gradients(
    params: ModelParams, cache: ImageCache, weights: LossWeights
) -> tuple[tuple[float, float, float, float], ModelParams]:
    """Per-image loss terms and the lambda-weighted parameter gradients."""
    terms = image_loss_terms(cache, weights)
    mask = cache.mask_grid
    d_grid = weights.lambda1 * (
        focal_grad(cache.grid, mask, weights.gamma_focal, weights.alpha_focal, weights.p_clamp)
        + dice_grad(cache.grid, mask, weights.eps_dice)
    )
    d_s = weights.lambda2 * global_grad(cache.s_anomaly, cache.label, weights.p_clamp)
    dw_n, dw_a = routing_grad(cache.decision.w_normal, cache.decision.w_anomaly, cache.label)
    grads = backward_image(
        params,
        cache,
        d_grid,
        d_s,
        weights.lambda3 * dw_n,
        weights.lambda3 * dw_a,
    )
    return terms, grads


def loss_gradients(
    params: ModelParams, caches: list[ImageCache], weights: LossWeights
) -> tuple[LossBreakdown, ModelParams]:
    """Batch-mean loss breakdown and analytic gradients for every tensor."""
    if not caches:
        raise ValidationError("empty batch")
    total_grads = params.zeros_like()
    sums = np.zeros(4)
    for cache in caches:
        terms, grads = image_loss_gradients(params, cache, weights)
        sums += terms
        total_grads.add_scaled(grads, 1.0)
    scale = 1.0 / len(caches)
    for _, arr in total_grads.named_tensors():
        arr *= scale
    focal, dice, glob, rout = (sums * scale).tolist()
    return total_loss(focal, dice, glob, rout, weights), total_grads
