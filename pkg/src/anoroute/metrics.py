"""Image/pixel AUROC and best-threshold F1, plus the per-class report.

AUROC is the Mann-Whitney pair statistic computed through average ranks
(ties get half credit), O(n log n). F1 is maximized over midpoint thresholds
between consecutive distinct scores plus -inf/+inf sentinels under the rule
``predict anomalous when score >= threshold``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .fusion_scorer import ModelParams, forward_image, upsample_bilinear
from .tensor_store import FeatureRecord, TextBank


def _average_ranks(scores: np.ndarray) -> np.ndarray:
    """1-based ranks with ties assigned the mean rank of their group."""
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auroc(scores, labels) -> float:
    """P(score_pos > score_neg) + 0.5 P(equal) over all positive/negative pairs."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be equal-length vectors")
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auroc needs at least one positive and one negative")
    ranks = _average_ranks(scores)
    pos_rank_sum = float(np.sum(ranks[labels == 1]))
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def pixel_auroc(maps: list[np.ndarray], masks: list[np.ndarray]) -> float:
    """AUROC over the flattened concatenation of every pixel of every image."""
    if len(maps) != len(masks):
        raise ValueError("need one mask per map")
    for p, m in zip(maps, masks):
        if p.shape != m.shape:
            raise ValueError(f"map {p.shape} and mask {m.shape} shapes differ")
    scores = np.concatenate([p.reshape(-1) for p in maps])
    labels = np.concatenate([m.reshape(-1) for m in masks]).astype(int)
    return auroc(scores, labels)


def max_f1(scores, labels) -> tuple[float, float]:
    """Best F1 over candidate thresholds; F1 ties go to the larger threshold."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    n_pos = int(np.sum(labels == 1))
    if n_pos == 0:
        raise ValueError("max_f1 needs at least one positive")
    order = np.argsort(-scores, kind="mergesort")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    distinct_ends = np.flatnonzero(
        np.append(sorted_scores[1:] != sorted_scores[:-1], True)
    )
    tp_cum = np.cumsum(sorted_labels)
    best_f1, best_thr = 0.0, float("inf")  # +inf sentinel: predict nothing
    for end in distinct_ends:
        tp = int(tp_cum[end])
        predicted = end + 1
        fp = predicted - tp
        fn = n_pos - tp
        f1 = 2.0 * tp / (2.0 * tp + fp + fn) if tp else 0.0
        if end + 1 < len(sorted_scores):
            thr = 0.5 * (sorted_scores[end] + sorted_scores[end + 1])
        else:
            thr = float("-inf")
        if f1 > best_f1:
            best_f1, best_thr = f1, thr
    return best_f1, best_thr


@dataclass
class ClassMetrics:
    name: str
    class_id: int
    n_images: int
    i_auc: float | None
    p_auc: float | None
    pixel_f1: float | None
    f1_threshold: float | None
    notice: str = ""


@dataclass
class EvalReport:
    per_class: list[ClassMetrics]
    mean_i_auc: float | None
    mean_p_auc: float | None
    mean_pixel_f1: float | None

    def to_csv(self, path: str | Path) -> None:
        lines = ["class,i_auc,p_auc,pixel_f1"]

        def cell(value: float | None) -> str:
            return "NA" if value is None else repr(float(value))

        for cm in self.per_class:
            lines.append(f"{cm.name},{cell(cm.i_auc)},{cell(cm.p_auc)},{cell(cm.pixel_f1)}")
        lines.append(
            f"mean,{cell(self.mean_i_auc)},{cell(self.mean_p_auc)},{cell(self.mean_pixel_f1)}"
        )
        Path(path).write_text("\n".join(lines) + "\n")

    def format_table(self) -> str:
        header = f"{'class':<16}{'I-AUC':>8}{'P-AUC':>8}{'Pixel-F1':>10}"
        rows = [header, "-" * len(header)]

        def cell(value: float | None) -> str:
            return "NA" if value is None else f"{value:.4f}"

        for cm in self.per_class:
            rows.append(
                f"{cm.name:<16}{cell(cm.i_auc):>8}{cell(cm.p_auc):>8}{cell(cm.pixel_f1):>10}"
            )
            if cm.notice:
                rows.append(f"  note: {cm.notice}")
        rows.append("-" * len(header))
        rows.append(
            f"{'mean':<16}{cell(self.mean_i_auc):>8}{cell(self.mean_p_auc):>8}"
            f"{cell(self.mean_pixel_f1):>10}"
        )
        return "\n".join(rows)


def map_at_mask_resolution(record: FeatureRecord, grid: np.ndarray) -> np.ndarray:
    """Score map at the stored mask's resolution (upsample only when needed)."""
    if record.mask_full.shape == grid.shape:
        return grid
    return upsample_bilinear(grid, *record.mask_full.shape)


def evaluate(
    records: list[FeatureRecord],
    params: ModelParams,
    bank: TextBank,
    tau: float,
    layer_ids: list[int] | None = None,
    threads: int = 1,
) -> EvalReport:
    """Per-class I-AUC / P-AUC / Pixel-F1 plus unweighted class means.

    ``layer_ids`` restricts map aggregation to a subset of the model's layers
    (image scores follow the same subset); None uses every trained layer.
    """
    use_layers = params.layer_ids if layer_ids is None else sorted(layer_ids)
    missing = [lid for lid in use_layers if lid not in params.layer_ids]
    if missing:
        raise ValueError(f"model has no adapters for layers {missing}")

    def score_one(record: FeatureRecord):
        output, _, _ = forward_image(record, params, bank, tau)
        grids = [output.layer_grids[lid] for lid in use_layers]
        grid = np.mean(np.stack(grids), axis=0)
        s_image = 0.5 * (output.s_global + float(grid.max()))
        return grid, s_image

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            scored = list(pool.map(score_one, records))
    else:
        scored = [score_one(rec) for rec in records]

    per_class: list[ClassMetrics] = []
    for class_id in sorted({rec.class_id for rec in records}):
        members = [i for i, rec in enumerate(records) if rec.class_id == class_id]
        name = bank.classes[class_id].name
        image_scores = np.array([scored[i][1] for i in members])
        image_labels = np.array([records[i].label for i in members])
        notices = []
        if image_labels.min() == image_labels.max():
            i_auc = None
            kind = "normal" if image_labels.max() == 1 else "anomalous"
            notices.append(f"no {kind} images; I-AUC not reported")
        else:
            i_auc = auroc(image_scores, image_labels)
        maps = [map_at_mask_resolution(records[i], scored[i][0]) for i in members]
        masks = [records[i].mask_full for i in members]
        flat_masks = np.concatenate([m.reshape(-1) for m in masks])
        if flat_masks.min() == flat_masks.max():
            p_auc = None
            notices.append("single-class pixels; P-AUC not reported")
        else:
            p_auc = pixel_auroc(maps, masks)
        if flat_masks.max() == 0:
            f1 = thr = None
            notices.append("no anomalous pixels; Pixel-F1 not reported")
        else:
            flat_scores = np.concatenate([p.reshape(-1) for p in maps])
            f1, thr = max_f1(flat_scores, flat_masks)
        per_class.append(
            ClassMetrics(
                name=name,
                class_id=class_id,
                n_images=len(members),
                i_auc=i_auc,
                p_auc=p_auc,
                pixel_f1=f1,
                f1_threshold=thr,
                notice="; ".join(notices),
            )
        )

    def mean_of(values: list[float | None]) -> float | None:
        defined = [v for v in values if v is not None]
        return float(np.mean(defined)) if defined else None

    return EvalReport(
        per_class=per_class,
        mean_i_auc=mean_of([cm.i_auc for cm in per_class]),
        mean_p_auc=mean_of([cm.p_auc for cm in per_class]),
        mean_pixel_f1=mean_of([cm.pixel_f1 for cm in per_class]),
    )
