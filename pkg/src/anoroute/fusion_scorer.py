"""Weighted residual fusion of the two adapter branches and map/score heads.

One image flows through here as: per extraction layer, both adapters run on
the frozen patch tokens; a single routing decision (from the final-layer CLS
token) blends the branches on top of the residual; per-patch anomaly
probabilities come from a temperature softmax over patch/text cosines;
layer grids are averaged, optionally upsampled, and pooled into an
image-level score. ``backward_image`` is the exact reverse of the whole
composition and feeds the trainer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .adapter_net import AdapterCache, AdapterParams, adapter_backward, adapter_forward, init_adapter
from .errors import ValidationError
from .tensor_store import FeatureRecord, TextBank
from .text_router import (
    RouteCache,
    RoutingDecision,
    cosine,
    cosine_backward,
    cosine_rows,
    cosine_rows_backward,
    init_projection,
    project_text,
    route,
    route_backward,
    softmax_pair,
    softmax_pair_backward,
)


@dataclass
class BranchAdapters:
    normal: AdapterParams
    anomaly: AdapterParams


@dataclass
class ModelParams:
    """All trainable state: dual adapters per layer plus the text projection."""

    adapters: dict[int, BranchAdapters]
    w_proj: np.ndarray  # [d_vis, d_text]
    version: int = 0

    @property
    def layer_ids(self) -> list[int]:
        return sorted(self.adapters)

    @property
    def d_vis(self) -> int:
        return self.w_proj.shape[0]

    @property
    def d_text(self) -> int:
        return self.w_proj.shape[1]

    @property
    def d_b(self) -> int:
        first = self.adapters[self.layer_ids[0]]
        return first.normal.w1.shape[0]

    def named_tensors(self):
        """Deterministic (checkpoint name, array) iteration over all tensors."""
        for lid in self.layer_ids:
            pair = self.adapters[lid]
            for code, branch in (("n", pair.normal), ("a", pair.anomaly)):
                for name, arr in branch.tensors():
                    yield f"layer{lid}/{code}/{name}", arr
        yield "router/W_proj", self.w_proj

    def zeros_like(self) -> "ModelParams":
        return ModelParams(
            adapters={
                lid: BranchAdapters(pair.normal.zeros_like(), pair.anomaly.zeros_like())
                for lid, pair in self.adapters.items()
            },
            w_proj=np.zeros_like(self.w_proj),
        )

    def add_scaled(self, other: "ModelParams", scale: float) -> None:
        for lid, pair in self.adapters.items():
            pair.normal.add_scaled(other.adapters[lid].normal, scale)
            pair.anomaly.add_scaled(other.adapters[lid].anomaly, scale)
        self.w_proj += scale * other.w_proj

    def is_finite(self) -> bool:
        return np.isfinite(self.w_proj).all() and all(
            pair.normal.is_finite() and pair.anomaly.is_finite()
            for pair in self.adapters.values()
        )


def _child_seed(seed: int, *tags: int) -> int:
    return int(np.random.SeedSequence([seed, *tags]).generate_state(1, np.uint64)[0])


def init_model(seed: int, d_vis: int, d_text: int, d_b: int, layer_ids: list[int]) -> ModelParams:
    """Fresh model: zero-output adapters, Xavier projection, all seeded."""
    adapters = {
        lid: BranchAdapters(
            normal=init_adapter(_child_seed(seed, 1, lid, 0), d_vis, d_b),
            anomaly=init_adapter(_child_seed(seed, 1, lid, 1), d_vis, d_b),
        )
        for lid in layer_ids
    }
    w_proj = init_projection(_child_seed(seed, 2), d_vis, d_text)
    return ModelParams(adapters=adapters, w_proj=w_proj)


def fuse(
    f: np.ndarray, f_n: np.ndarray, f_a: np.ndarray, w: RoutingDecision
) -> np.ndarray:
    """Residual blend w_n * f_n + w_a * f_a + f with per-image scalar weights."""
    if not (f.shape == f_n.shape == f_a.shape):
        raise ValueError(f"shape mismatch: {f.shape}, {f_n.shape}, {f_a.shape}")
    return w.w_normal * f_n + w.w_anomaly * f_a + f


def _softmax_rows(z_n: np.ndarray, z_a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    m = np.maximum(z_n, z_a)
    e_n = np.exp(z_n - m)
    e_a = np.exp(z_a - m)
    s = e_n + e_a
    return e_n / s, e_a / s


def _patch_probs(
    f_adapted: np.ndarray, t_n_proj: np.ndarray, t_a_proj: np.ndarray, tau: float
) -> tuple[np.ndarray, np.ndarray]:
    cos_n = cosine_rows(f_adapted, t_n_proj)
    cos_a = cosine_rows(f_adapted, t_a_proj)
    return _softmax_rows(cos_n / tau, cos_a / tau)


def patch_anomaly_grid(
    f_adapted: np.ndarray, t_n_proj: np.ndarray, t_a_proj: np.ndarray, tau: float
) -> np.ndarray:
    """Per-patch anomaly probability, reshaped row-major to the square grid."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    n = f_adapted.shape[0]
    g = int(np.sqrt(n))
    if g * g != n:
        raise ValueError(f"patch count {n} is not a perfect square")
    _, p_a = _patch_probs(f_adapted, t_n_proj, t_a_proj, tau)
    return p_a.reshape(g, g)


def aggregate_layers(grids: list[np.ndarray]) -> np.ndarray:
    """Arithmetic mean of per-layer patch grids."""
    if not grids:
        raise ValueError("no grids to aggregate")
    shape = grids[0].shape
    if any(g.shape != shape for g in grids):
        raise ValueError("grids must share one shape")
    return np.mean(np.stack(grids), axis=0)


def upsample_bilinear(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel sample centers and clamped edges."""
    g_h, g_w = grid.shape
    ys = (np.arange(out_h) + 0.5) * g_h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * g_w / out_w - 0.5
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    ty = ys - y0
    tx = xs - x0
    y0c, y1c = np.clip(y0, 0, g_h - 1), np.clip(y0 + 1, 0, g_h - 1)
    x0c, x1c = np.clip(x0, 0, g_w - 1), np.clip(x0 + 1, 0, g_w - 1)
    v00 = grid[np.ix_(y0c, x0c)]
    v01 = grid[np.ix_(y0c, x1c)]
    v10 = grid[np.ix_(y1c, x0c)]
    v11 = grid[np.ix_(y1c, x1c)]
    top = v00 * (1 - tx)[None, :] + v01 * tx[None, :]
    bottom = v10 * (1 - tx)[None, :] + v11 * tx[None, :]
    return top * (1 - ty)[:, None] + bottom * ty[:, None]


def image_score(
    fused_layers: list[np.ndarray],
    t_n_proj: np.ndarray,
    t_a_proj: np.ndarray,
    tau: float,
    p_grid: np.ndarray,
) -> tuple[float, float]:
    """Global softmax score of the pooled adapted tokens, blended with the map peak.

    The peak is taken over the patch grid so the score does not depend on the
    export resolution.
    """
    pooled = np.mean([f.mean(axis=0) for f in fused_layers], axis=0)
    _, s_a = softmax_pair(cosine(pooled, t_n_proj) / tau, cosine(pooled, t_a_proj) / tau)
    return s_a, 0.5 * (s_a + float(p_grid.max()))


@dataclass
class AnomalyOutput:
    """Pixel map in [0,1], its source patch grid, and the image-level scores."""

    map: np.ndarray
    image_score: float
    s_global: float
    grid: np.ndarray
    layer_grids: dict[int, np.ndarray]


@dataclass
class LayerCache:
    layer_id: int
    cache_n: AdapterCache
    cache_a: AdapterCache
    f_n: np.ndarray
    f_a: np.ndarray
    fused: np.ndarray
    p_n: np.ndarray
    p_a: np.ndarray


@dataclass
class ImageCache:
    """Everything ``backward_image`` needs to replay one image exactly."""

    label: int
    mask_grid: np.ndarray
    t_n: np.ndarray
    t_a: np.ndarray
    t_n_proj: np.ndarray
    t_a_proj: np.ndarray
    route_cache: RouteCache
    decision: RoutingDecision
    layers: list[LayerCache] = field(default_factory=list)
    g_vec: np.ndarray | None = None
    s_normal: float = 0.0
    s_anomaly: float = 0.0
    grid: np.ndarray | None = None
    tau: float = 0.0
    params_version: int = -1


def forward_image(
    record: FeatureRecord,
    params: ModelParams,
    bank: TextBank,
    tau: float,
    map_size: tuple[int, int] | None = None,
) -> tuple[AnomalyOutput, RoutingDecision, ImageCache]:
    """Full pipeline for one image; the cache enables the exact backward."""
    if record.d_vis != params.d_vis:
        raise ValidationError(
            f"img{record.index}: D_vis {record.d_vis} != model D_vis {params.d_vis}"
        )
    if bank.d_text != params.d_text:
        raise ValidationError(
            f"text bank D_text {bank.d_text} != model D_text {params.d_text}"
        )
    missing = [lid for lid in params.layer_ids if lid not in record.patch_tokens]
    if missing:
        raise ValidationError(f"img{record.index}: layers {missing} absent from features")

    entry = bank.classes[record.class_id]
    t_n, t_a = entry.normal_embed, entry.anomaly_embed
    t_n_proj = project_text(params.w_proj, t_n)
    t_a_proj = project_text(params.w_proj, t_a)
    decision, route_cache = route(record.cls_token, t_n_proj, t_a_proj, tau)

    cache = ImageCache(
        label=record.label,
        mask_grid=record.mask_grid,
        t_n=t_n,
        t_a=t_a,
        t_n_proj=t_n_proj,
        t_a_proj=t_a_proj,
        route_cache=route_cache,
        decision=decision,
        tau=tau,
        params_version=params.version,
    )

    g = record.grid_size
    layer_grids: dict[int, np.ndarray] = {}
    for lid in params.layer_ids:
        x = record.patch_tokens[lid]
        pair = params.adapters[lid]
        f_n, cache_n = adapter_forward(pair.normal, x)
        f_a, cache_a = adapter_forward(pair.anomaly, x)
        fused = fuse(x, f_n, f_a, decision)
        p_n, p_a = _patch_probs(fused, t_n_proj, t_a_proj, tau)
        cache.layers.append(
            LayerCache(
                layer_id=lid,
                cache_n=cache_n,
                cache_a=cache_a,
                f_n=f_n,
                f_a=f_a,
                fused=fused,
                p_n=p_n,
                p_a=p_a,
            )
        )
        layer_grids[lid] = p_a.reshape(g, g)

    grid = aggregate_layers(list(layer_grids.values()))
    cache.grid = grid
    cache.g_vec = np.mean([layer.fused.mean(axis=0) for layer in cache.layers], axis=0)
    s_n, s_a = softmax_pair(
        cosine(cache.g_vec, t_n_proj) / tau, cosine(cache.g_vec, t_a_proj) / tau
    )
    cache.s_normal, cache.s_anomaly = s_n, s_a
    score = 0.5 * (s_a + float(grid.max()))
    out_map = upsample_bilinear(grid, *map_size) if map_size is not None else grid.copy()
    output = AnomalyOutput(
        map=out_map, image_score=score, s_global=s_a, grid=grid, layer_grids=layer_grids
    )
    return output, decision, cache


def backward_image(
    params: ModelParams,
    cache: ImageCache,
    d_grid: np.ndarray,
    d_s_global: float,
    dw_normal: float = 0.0,
    dw_anomaly: float = 0.0,
) -> ModelParams:
    """Exact reverse of :func:`forward_image` for one image.

    ``d_grid`` is the upstream gradient on the aggregated patch grid,
    ``d_s_global`` on the global score, and the ``dw_*`` terms are direct
    gradients on the routing weights (from the routing regularizer). Returns
    gradients in a ModelParams-shaped container; frozen inputs (patch tokens,
    CLS) receive no gradient.
    """
    if cache.params_version != params.version:
        raise ValidationError(
            f"stale cache: built at params version {cache.params_version}, "
            f"current is {params.version}"
        )
    grads = params.zeros_like()
    tau = cache.tau
    n_layers = len(cache.layers)
    n_patches = cache.layers[0].fused.shape[0]
    dt_n_proj = np.zeros_like(cache.t_n_proj)
    dt_a_proj = np.zeros_like(cache.t_a_proj)

    # Global-score head: softmax -> pooled cosines -> pooled vector.
    dz_n, dz_a = softmax_pair_backward(
        (cache.s_normal, cache.s_anomaly), (0.0, d_s_global)
    )
    dg1, dv_n = cosine_backward(cache.g_vec, cache.t_n_proj, dz_n / tau)
    dg2, dv_a = cosine_backward(cache.g_vec, cache.t_a_proj, dz_a / tau)
    dt_n_proj += dv_n
    dt_a_proj += dv_a
    d_pooled_row = (dg1 + dg2) / (n_layers * n_patches)

    dw_n_total = dw_normal
    dw_a_total = dw_anomaly
    d_patch = (d_grid / n_layers).reshape(-1)
    for layer in cache.layers:
        d_fused = np.broadcast_to(d_pooled_row, layer.fused.shape).copy()
        # Map head: anomaly-component softmax gradient per patch.
        s = layer.p_n * layer.p_a * d_patch
        dx_n, dv_n = cosine_rows_backward(layer.fused, cache.t_n_proj, -s / tau)
        dx_a, dv_a = cosine_rows_backward(layer.fused, cache.t_a_proj, s / tau)
        d_fused += dx_n + dx_a
        dt_n_proj += dv_n
        dt_a_proj += dv_a
        # Fusion: scalar weights collect the full elementwise products.
        dw_n_total += float(np.sum(layer.f_n * d_fused))
        dw_a_total += float(np.sum(layer.f_a * d_fused))
        pair = params.adapters[layer.layer_id]
        grad_pair = grads.adapters[layer.layer_id]
        g_n, _ = adapter_backward(pair.normal, layer.cache_n, cache.decision.w_normal * d_fused)
        g_a, _ = adapter_backward(pair.anomaly, layer.cache_a, cache.decision.w_anomaly * d_fused)
        grad_pair.normal.add_scaled(g_n, 1.0)
        grad_pair.anomaly.add_scaled(g_a, 1.0)

    d_route_n, d_route_a = route_backward(cache.route_cache, dw_n_total, dw_a_total)
    dt_n_proj += d_route_n
    dt_a_proj += d_route_a
    grads.w_proj += np.outer(dt_n_proj, cache.t_n) + np.outer(dt_a_proj, cache.t_a)
    return grads
