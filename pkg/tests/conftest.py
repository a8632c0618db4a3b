"""Shared builders for small randomized instances and the FD gradient oracle."""

from __future__ import annotations

import numpy as np

from anoroute.fusion_scorer import forward_image, init_model
from anoroute.losses import LossWeights, image_loss_terms, total_loss
from anoroute.tensor_store import FeatureRecord, TextBank, TextEntry


def make_record(
    rng: np.random.Generator,
    index: int = 0,
    n_patches: int = 4,
    d_vis: int = 8,
    layer_ids=(1, 2),
    class_id: int = 0,
    label: int | None = None,
) -> FeatureRecord:
    """One random feature record with a one-patch mask when anomalous."""
    g = int(np.sqrt(n_patches))
    assert g * g == n_patches
    mask = np.zeros((g, g), dtype=np.uint8)
    if label is None:
        label = index % 2
    if label:
        mask[int(rng.integers(0, g)), int(rng.integers(0, g))] = 1
    patches = {lid: rng.normal(size=(n_patches, d_vis)) for lid in layer_ids}
    return FeatureRecord(
        index=index,
        patch_tokens=patches,
        cls_token=rng.normal(size=d_vis),
        mask_grid=mask,
        mask_full=mask,
        label=int(mask.any()),
        class_id=class_id,
    )


def make_bank(rng: np.random.Generator, n_classes: int = 1, d_text: int = 6) -> TextBank:
    return TextBank(
        classes=[
            TextEntry(
                name=f"c{c}",
                normal_embed=rng.normal(size=d_text),
                anomaly_embed=rng.normal(size=d_text),
            )
            for c in range(n_classes)
        ]
    )


def tiny_instance(
    seed: int,
    d_vis: int = 8,
    d_b: int = 4,
    d_text: int = 6,
    n_patches: int = 4,
    layer_ids=(1, 2),
    batch: int = 2,
    randomize: bool = True,
):
    """Small model + batch with every parameter tensor randomized.

    Randomizing the zero-initialized output layers makes all gradient paths
    active for finite-difference checks.
    """
    rng = np.random.default_rng(seed)
    params = init_model(seed, d_vis, d_text, d_b, list(layer_ids))
    if randomize:
        for _, arr in params.named_tensors():
            arr += rng.normal(scale=0.3, size=arr.shape)
    records = [
        make_record(rng, index=i, n_patches=n_patches, d_vis=d_vis, layer_ids=layer_ids)
        for i in range(batch)
    ]
    bank = make_bank(rng, n_classes=1, d_text=d_text)
    return params, records, bank


def batch_total(params, records, bank, weights: LossWeights, tau: float = 0.1):
    """Batch-mean total loss via independent recomputation (the FD oracle path)."""
    caches = [forward_image(rec, params, bank, tau)[2] for rec in records]
    terms = np.mean([image_loss_terms(c, weights) for c in caches], axis=0)
    return total_loss(*terms.tolist(), weights).total, caches


def min_preactivation_gap(caches) -> float:
    """Distance of the closest hidden pre-activation to the LeakyReLU kink."""
    gap = np.inf
    for cache in caches:
        for layer in cache.layers:
            for ad in (layer.cache_n, layer.cache_a):
                for z in (ad.z1, ad.z2, ad.z3):
                    gap = min(gap, float(np.min(np.abs(z))))
    return gap


def full_graph_fd_check(
    seed: int,
    weights: LossWeights | None = None,
    h: float = 1e-4,
    coords_per_tensor: int = 6,
    **instance_kwargs,
):
    """Compare analytic batch gradients against central differences.

    Every probed coordinate must satisfy rel < 1e-5 or |analytic - fd| <
    1e-9: central differences of an O(1) loss at h=1e-4 carry ~1e-11 of
    float64 roundoff, so coordinates whose true gradient is below ~1e-6
    cannot support the relative comparison and are held to the (much
    stricter in context) absolute bound. Returns (max rel among coordinates
    outside the absolute backstop, max abs difference anywhere, kink gap).
    """
    from anoroute.losses import loss_gradients

    weights = weights or LossWeights()
    params, records, bank = tiny_instance(seed, **instance_kwargs)
    total, caches = batch_total(params, records, bank, weights)
    breakdown, grads = loss_gradients(params, caches, weights)
    assert abs(breakdown.total - total) < 1e-12
    grad_map = dict(grads.named_tensors())
    rng = np.random.default_rng(seed + 99)
    max_rel = 0.0
    max_abs = 0.0
    abs_backstop = 1e-9
    for name, arr in params.named_tensors():
        flat = arr.reshape(-1)
        count = flat.size if coords_per_tensor == 0 else min(coords_per_tensor, flat.size)
        idxs = rng.choice(flat.size, size=count, replace=False)
        for idx in idxs:
            orig = flat[idx]
            flat[idx] = orig + h
            up, _ = batch_total(params, records, bank, weights)
            flat[idx] = orig - h
            down, _ = batch_total(params, records, bank, weights)
            flat[idx] = orig
            fd = (up - down) / (2.0 * h)
            analytic = grad_map[name].reshape(-1)[idx]
            diff = abs(analytic - fd)
            max_abs = max(max_abs, diff)
            if diff >= abs_backstop:
                max_rel = max(max_rel, diff / (abs(fd) + 1e-8))
    return max_rel, max_abs, min_preactivation_gap(caches)
