"""Synthetic feature datasets with planted anomalies, for desk-scale runs.

Geometry per class: a unit prototype direction (drawn from the first half of
the visual dimensions) and an orthogonal unit defect direction (from the
second half). Normal patches are prototype + noise; anomalous images plant a
connected patch region shifted along a randomly rotated copy of the defect
direction (rotation per patch, shared across layers), so anomalies are both
displaced and more spread than normals. Text embeddings are the images of
the prototype and the shifted prototype under a fixed seeded linear map into
text space; the map attenuates the defect subspace so each class's two
embeddings are nearly parallel, like text encodings of prompt pairs that
differ in a single word. The class structure depends only on
``cross_modal_seed``, so datasets generated with different ``data_seed``
values are train/test splits of one distribution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .tensor_store import FeatureRecord, TextBank, TextEntry

ROTATION_MAX = np.pi / 2  # per-patch defect rotation: diverse, some near-orthogonal
DEFECT_TEXT_SCALE = 0.5  # cross-modal map attenuation of the defect subspace


@dataclass
class SynthConfig:
    n_classes: int = 2
    images_per_class: int = 64
    anomaly_fraction: float = 0.5
    grid: int = 8
    d_vis: int = 32
    d_text: int = 16
    layers: int = 2
    noise_std: float = 0.1
    defect_shift: float = 1.0
    cross_modal_seed: int = 1
    data_seed: int = 0

    def validate(self) -> None:
        if not (0.0 < self.anomaly_fraction < 1.0):
            raise ValidationError("anomaly_fraction must be in (0, 1)")
        if self.defect_shift <= 0:
            raise ValidationError("defect_shift must be positive")
        for name in ("n_classes", "images_per_class", "grid", "d_vis", "d_text", "layers"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.noise_std < 0:
            raise ValidationError("noise_std must be >= 0")


def _unit(vec: np.ndarray) -> np.ndarray:
    return vec / np.linalg.norm(vec)


def _orthogonal_unit(rng: np.random.Generator, against: np.ndarray) -> np.ndarray:
    vec = rng.normal(size=against.shape[0])
    vec -= (vec @ against) * against
    return _unit(vec)


def _subspace_unit(rng: np.random.Generator, dim: int, lo: int, hi: int) -> np.ndarray:
    vec = np.zeros(dim)
    vec[lo:hi] = rng.normal(size=hi - lo)
    return _unit(vec)


def _rotated(rng: np.random.Generator, v: np.ndarray) -> np.ndarray:
    """Rotate unit ``v`` by a random angle in [0, ROTATION_MAX] toward a random
    orthogonal direction; output stays unit length."""
    axis = _orthogonal_unit(rng, v)
    theta = rng.uniform(0.0, ROTATION_MAX)
    return np.cos(theta) * v + np.sin(theta) * axis


def _connected_region(rng: np.random.Generator, grid: int, size: int) -> set[tuple[int, int]]:
    """Grow a connected cell set by a random walk with 4-neighbor moves."""
    r = int(rng.integers(0, grid))
    c = int(rng.integers(0, grid))
    cells = {(r, c)}
    while len(cells) < size:
        dr, dc = ((-1, 0), (1, 0), (0, -1), (0, 1))[int(rng.integers(0, 4))]
        r = min(max(r + dr, 0), grid - 1)
        c = min(max(c + dc, 0), grid - 1)
        cells.add((r, c))
    return cells


@dataclass
class _ClassStructure:
    prototype: np.ndarray
    defect_dir: np.ndarray
    normal_embed: np.ndarray
    anomaly_embed: np.ndarray


def _class_structures(config: SynthConfig) -> list[_ClassStructure]:
    rng = np.random.default_rng([config.cross_modal_seed, 11])
    # Linear map into text space: a random frame composed with a diagonal that
    # attenuates the defect half-space, so per-class prompt pairs come out
    # nearly parallel (as real one-word prompt edits do).
    half = config.d_vis // 2 if config.d_vis >= 2 else config.d_vis
    frame = rng.normal(size=(config.d_text, config.d_vis)) / math.sqrt(config.d_vis)
    scales = np.ones(config.d_vis)
    scales[half:] = DEFECT_TEXT_SCALE
    to_text = frame * scales[None, :]
    structures = []
    for _ in range(config.n_classes):
        prototype = _subspace_unit(rng, config.d_vis, 0, half)
        if half < config.d_vis:
            defect = _subspace_unit(rng, config.d_vis, half, config.d_vis)
        else:
            defect = _orthogonal_unit(rng, prototype)
        structures.append(
            _ClassStructure(
                prototype=prototype,
                defect_dir=defect,
                normal_embed=to_text @ prototype,
                anomaly_embed=to_text @ (prototype + config.defect_shift * defect),
            )
        )
    return structures


def generate(config: SynthConfig) -> tuple[list[FeatureRecord], TextBank]:
    """Deterministic dataset + text bank for the given config."""
    config.validate()
    structures = _class_structures(config)
    rng = np.random.default_rng([config.data_seed, 13])
    g = config.grid
    n_patch = g * g
    size_lo = max(1, round(0.05 * n_patch))
    size_hi = max(size_lo, round(0.30 * n_patch))

    records: list[FeatureRecord] = []
    index = 0
    for class_id, struct in enumerate(structures):
        n_anom = round(config.images_per_class * config.anomaly_fraction)
        labels = np.array([1] * n_anom + [0] * (config.images_per_class - n_anom))
        labels = labels[rng.permutation(config.images_per_class)]
        for label in labels:
            mask = np.zeros((g, g), dtype=np.uint8)
            defect_vectors = np.zeros((n_patch, config.d_vis))
            if label:
                size = int(rng.integers(size_lo, size_hi + 1))
                for r, c in sorted(_connected_region(rng, g, size)):
                    mask[r, c] = 1
                    defect_vectors[r * g + c] = config.defect_shift * _rotated(
                        rng, struct.defect_dir
                    )
            patches = {}
            for layer in range(1, config.layers + 1):
                noise = rng.normal(scale=config.noise_std, size=(n_patch, config.d_vis))
                patches[layer] = struct.prototype[None, :] + defect_vectors + noise
            records.append(
                FeatureRecord(
                    index=index,
                    patch_tokens=patches,
                    cls_token=patches[config.layers].mean(axis=0),
                    mask_grid=mask,
                    mask_full=mask,
                    label=int(label),
                    class_id=class_id,
                )
            )
            index += 1

    bank = TextBank(
        classes=[
            TextEntry(
                name=f"synthetic{c}",
                normal_embed=struct.normal_embed,
                anomaly_embed=struct.anomaly_embed,
            )
            for c, struct in enumerate(structures)
        ]
    )
    return records, bank
