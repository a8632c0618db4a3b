"""Text projection into visual space and temperature-softmax routing.

The router compares a global image token against the projected normal and
anomalous text anchors and splits unit weight between the two adapter
branches. Cosine similarity is guarded against zero norms; the softmax is
computed with max subtraction so extreme temperatures stay finite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NORM_EPS = 1e-8


@dataclass
class RoutingDecision:
    """Per-image branch weights; non-negative and summing to one."""

    w_normal: float
    w_anomaly: float


@dataclass
class RouteCache:
    f_cls: np.ndarray
    t_n_proj: np.ndarray
    t_a_proj: np.ndarray
    cos_n: float
    cos_a: float
    w_normal: float
    w_anomaly: float
    tau: float


def project_text(w_proj: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Plain matrix-vector projection of a text embedding into visual space."""
    if w_proj.shape[1] != t.shape[0]:
        raise ValueError(f"projection is {w_proj.shape}, embedding is {t.shape}")
    return w_proj @ t


PROJECTION_GAIN = 0.1


def init_projection(seed: int, d_vis: int, d_text: int) -> np.ndarray:
    """Seeded Xavier-uniform [d_vis, d_text] matrix, scaled by a small gain.

    The gain keeps the initial CLS/text cosines well below the routing
    temperature, so routing starts near (0.5, 0.5) at any embedding width and
    the regularizer decides the specialization.
    """
    bound = PROJECTION_GAIN * np.sqrt(6.0 / (d_vis + d_text))
    return np.random.default_rng(seed).uniform(-bound, bound, size=(d_vis, d_text))


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine similarity with both norms clamped below at NORM_EPS."""
    nu = max(float(np.linalg.norm(u)), NORM_EPS)
    nv = max(float(np.linalg.norm(v)), NORM_EPS)
    return float(u @ v) / (nu * nv)


def cosine_backward(
    u: np.ndarray, v: np.ndarray, dc: float
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of :func:`cosine` w.r.t. both vectors.

    The norm clamp is flat below NORM_EPS, so the self-norm term vanishes
    there, matching the forward exactly.
    """
    norm_u = float(np.linalg.norm(u))
    norm_v = float(np.linalg.norm(v))
    nu = max(norm_u, NORM_EPS)
    nv = max(norm_v, NORM_EPS)
    c = float(u @ v) / (nu * nv)
    du = v / (nu * nv)
    if norm_u > NORM_EPS:
        du = du - (c / (nu * nu)) * u
    dv = u / (nu * nv)
    if norm_v > NORM_EPS:
        dv = dv - (c / (nv * nv)) * v
    return dc * du, dc * dv


def cosine_rows(x: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Cosine of every row of ``x`` against ``v``; returns a length-N vector."""
    norms = np.linalg.norm(x, axis=1)
    nx = np.maximum(norms, NORM_EPS)
    nv = max(float(np.linalg.norm(v)), NORM_EPS)
    return (x @ v) / (nx * nv)


def cosine_rows_backward(
    x: np.ndarray, v: np.ndarray, dc: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise gradients of :func:`cosine_rows` w.r.t. the rows and ``v``."""
    norms = np.linalg.norm(x, axis=1)
    nx = np.maximum(norms, NORM_EPS)
    norm_v = float(np.linalg.norm(v))
    nv = max(norm_v, NORM_EPS)
    c = (x @ v) / (nx * nv)
    dx = dc[:, None] * (v[None, :] / (nx * nv)[:, None])
    active = norms > NORM_EPS
    dx -= ((dc * c * active) / (nx * nx))[:, None] * x
    dv = x.T @ (dc / (nx * nv))
    if norm_v > NORM_EPS:
        dv -= float(dc @ c) / (nv * nv) * v
    return dx, dv


def softmax_pair(a: float, b: float) -> tuple[float, float]:
    """Numerically stable two-way softmax."""
    m = max(a, b)
    ea = np.exp(a - m)
    eb = np.exp(b - m)
    s = ea + eb
    return float(ea / s), float(eb / s)


def softmax_pair_backward(
    p: tuple[float, float], dp: tuple[float, float]
) -> tuple[float, float]:
    """Jacobian-transpose product dz_i = p_i * (dp_i - sum_k p_k dp_k)."""
    inner = p[0] * dp[0] + p[1] * dp[1]
    return p[0] * (dp[0] - inner), p[1] * (dp[1] - inner)


def route(
    f_cls: np.ndarray, t_n_proj: np.ndarray, t_a_proj: np.ndarray, tau: float
) -> tuple[RoutingDecision, RouteCache]:
    """Temperature-scaled softmax over the two CLS/text cosine similarities."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    cos_n = cosine(f_cls, t_n_proj)
    cos_a = cosine(f_cls, t_a_proj)
    w_n, w_a = softmax_pair(cos_n / tau, cos_a / tau)
    decision = RoutingDecision(w_normal=w_n, w_anomaly=w_a)
    cache = RouteCache(
        f_cls=f_cls,
        t_n_proj=t_n_proj,
        t_a_proj=t_a_proj,
        cos_n=cos_n,
        cos_a=cos_a,
        w_normal=w_n,
        w_anomaly=w_a,
        tau=tau,
    )
    return decision, cache


def route_backward(
    cache: RouteCache, dw_normal: float, dw_anomaly: float
) -> tuple[np.ndarray, np.ndarray]:
    """Backpropagate routing-weight gradients onto the projected text anchors.

    The CLS token is a frozen input, so its gradient is dropped here.
    """
    dz_n, dz_a = softmax_pair_backward(
        (cache.w_normal, cache.w_anomaly), (dw_normal, dw_anomaly)
    )
    _, dt_n = cosine_backward(cache.f_cls, cache.t_n_proj, dz_n / cache.tau)
    _, dt_a = cosine_backward(cache.f_cls, cache.t_a_proj, dz_a / cache.tau)
    return dt_n, dt_a
