"""Bottleneck adapter MLP and its exact reverse-mode gradients.

Topology is D_vis -> d_b -> d_b -> d_b -> D_vis with LeakyReLU (slope 0.01)
after the first three layers and no activation after the fourth. The output
projection starts at exactly zero so a fresh adapter is the zero map and the
surrounding residual fusion starts as the identity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LEAKY_SLOPE = 0.01

_FIELDS = ("w1", "b1", "w2", "b2", "w3", "b3", "w4", "b4")
_TENSOR_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3", "W4", "b4")


@dataclass
class AdapterParams:
    """Weights of one adapter branch; also reused as a gradient container."""

    w1: np.ndarray  # [d_b, D_vis]
    b1: np.ndarray  # [d_b]
    w2: np.ndarray  # [d_b, d_b]
    b2: np.ndarray  # [d_b]
    w3: np.ndarray  # [d_b, d_b]
    b3: np.ndarray  # [d_b]
    w4: np.ndarray  # [D_vis, d_b]
    b4: np.ndarray  # [D_vis]

    def tensors(self):
        """Yield (canonical name, array) pairs in checkpoint order."""
        for field, name in zip(_FIELDS, _TENSOR_NAMES):
            yield name, getattr(self, field)

    def zeros_like(self) -> "AdapterParams":
        return AdapterParams(*(np.zeros_like(getattr(self, f)) for f in _FIELDS))

    def add_scaled(self, other: "AdapterParams", scale: float) -> None:
        for field in _FIELDS:
            getattr(self, field).__iadd__(scale * getattr(other, field))

    def is_finite(self) -> bool:
        return all(np.isfinite(getattr(self, f)).all() for f in _FIELDS)


@dataclass
class AdapterCache:
    """Pre-activations captured by the forward pass for the exact backward."""

    x: np.ndarray
    z1: np.ndarray
    a1: np.ndarray
    z2: np.ndarray
    a2: np.ndarray
    z3: np.ndarray
    a3: np.ndarray


def init_adapter(seed: int, d_vis: int, d_b: int) -> AdapterParams:
    """Seeded Kaiming-uniform init for the hidden layers, zeros for the output.

    Bound is sqrt(6 / fan_in) per tensor; draw order is w1, b1, w2, b2, w3, b3.
    """
    if d_vis < 1 or d_b < 1:
        raise ValueError("d_vis and d_b must be >= 1")
    rng = np.random.default_rng(seed)

    def kaiming(shape, fan_in):
        bound = np.sqrt(6.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape)

    return AdapterParams(
        w1=kaiming((d_b, d_vis), d_vis),
        b1=kaiming((d_b,), d_vis),
        w2=kaiming((d_b, d_b), d_b),
        b2=kaiming((d_b,), d_b),
        w3=kaiming((d_b, d_b), d_b),
        b3=kaiming((d_b,), d_b),
        w4=np.zeros((d_vis, d_b)),
        b4=np.zeros(d_vis),
    )


def _leaky(z: np.ndarray) -> np.ndarray:
    return np.where(z > 0, z, LEAKY_SLOPE * z)


def _leaky_grad(z: np.ndarray) -> np.ndarray:
    # Subgradient at exactly 0 fixed to the negative slope.
    return np.where(z > 0, 1.0, LEAKY_SLOPE)


def adapter_forward(params: AdapterParams, x: np.ndarray) -> tuple[np.ndarray, AdapterCache]:
    """Apply the adapter row-wise to ``x`` of shape [N, D_vis]."""
    if x.ndim != 2 or x.shape[1] != params.w1.shape[1]:
        raise ValueError(f"input shape {x.shape} does not match D_vis={params.w1.shape[1]}")
    z1 = x @ params.w1.T + params.b1
    a1 = _leaky(z1)
    z2 = a1 @ params.w2.T + params.b2
    a2 = _leaky(z2)
    z3 = a2 @ params.w3.T + params.b3
    a3 = _leaky(z3)
    y = a3 @ params.w4.T + params.b4
    return y, AdapterCache(x=x, z1=z1, a1=a1, z2=z2, a2=a2, z3=z3, a3=a3)


def adapter_backward(
    params: AdapterParams, cache: AdapterCache, dy: np.ndarray
) -> tuple[AdapterParams, np.ndarray]:
    """Exact transpose-chain of :func:`adapter_forward`.

    Returns gradients in an AdapterParams-shaped container plus the gradient
    with respect to the input rows.
    """
    if dy.shape != (cache.x.shape[0], params.w4.shape[0]):
        raise ValueError(f"dy shape {dy.shape} does not match forward output")
    dw4 = dy.T @ cache.a3
    db4 = dy.sum(axis=0)
    dz3 = (dy @ params.w4) * _leaky_grad(cache.z3)
    dw3 = dz3.T @ cache.a2
    db3 = dz3.sum(axis=0)
    dz2 = (dz3 @ params.w3) * _leaky_grad(cache.z2)
    dw2 = dz2.T @ cache.a1
    db2 = dz2.sum(axis=0)
    dz1 = (dz2 @ params.w2) * _leaky_grad(cache.z1)
    dw1 = dz1.T @ cache.x
    db1 = dz1.sum(axis=0)
    dx = dz1 @ params.w1
    grads = AdapterParams(w1=dw1, b1=db1, w2=dw2, b2=db2, w3=dw3, b3=db3, w4=dw4, b4=db4)
    return grads, dx
