"""Mini-batch AdamW training loop with deterministic shuffling and resume.

Determinism contract: given (seed, dataset) two runs produce bitwise-equal
checkpoints and logs. All reductions run in fixed index order, the shuffle
stream is an explicit seeded generator whose state is checkpointed, and
checkpoints carry no timestamps.
"""

from __future__ import annotations

import hashlib
import json
import os
import warnings
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import NumericalAbort, ValidationError
from .fusion_scorer import BranchAdapters, ModelParams, forward_image, init_model
from .adapter_net import AdapterParams
from .losses import LossBreakdown, LossWeights, image_loss_gradients, total_loss
from .tensor_store import FeatureRecord, TensorContainer, TextBank, read_container, write_container

CSV_COLUMNS = (
    "epoch",
    "focal",
    "dice",
    "seg",
    "global",
    "routing",
    "total",
    "mean_wn_normal",
    "mean_wa_anomaly",
)


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 1e-4
    seed: int = 0
    tau: float = 0.1
    layers: str = "auto"
    d_b: int = 256
    checkpoint_every: int = 0  # 0 = final checkpoint only
    loss_weights: LossWeights = field(default_factory=LossWeights)

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ValidationError("lr must be positive")
        if self.tau <= 0:
            raise ValidationError("tau must be positive")
        if self.d_b < 1:
            raise ValidationError("d_b must be >= 1")


@dataclass
class OptimizerState:
    """AdamW moments per tensor plus the shared step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    @classmethod
    def for_params(cls, params: ModelParams, lr: float, **kwargs) -> "OptimizerState":
        return cls(
            m={name: np.zeros_like(arr) for name, arr in params.named_tensors()},
            v={name: np.zeros_like(arr) for name, arr in params.named_tensors()},
            t=0,
            lr=lr,
            **kwargs,
        )


def _decays(name: str) -> bool:
    # Decoupled decay applies to weight matrices only, never biases.
    return name.rsplit("/", 1)[-1].startswith("W")


def adamw_step(
    params: ModelParams, grads: ModelParams, state: OptimizerState
) -> tuple[ModelParams, OptimizerState]:
    """One decoupled-weight-decay Adam update, in place."""
    state.t += 1
    grad_map = dict(grads.named_tensors())
    bias1 = 1.0 - state.beta1**state.t
    bias2 = 1.0 - state.beta2**state.t
    for name, p in params.named_tensors():
        g = grad_map[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != param shape {p.shape} for {name}")
        if state.weight_decay != 0.0 and _decays(name):
            p -= state.lr * state.weight_decay * p
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / bias1) / (np.sqrt(v / bias2) + state.eps)
    params.version += 1
    return params, state


def resolve_layers(selection: str, available: list[int]) -> list[int]:
    """"auto" picks 4 evenly spaced layers when more exist, else all."""
    if selection == "auto":
        if len(available) <= 4:
            return list(available)
        idx = np.round(np.linspace(0, len(available) - 1, 4)).astype(int)
        return [available[i] for i in idx]
    try:
        chosen = [int(tok) for tok in selection.split(",") if tok.strip()]
    except ValueError:
        raise ValidationError(f"bad layer selection {selection!r}") from None
    if not chosen:
        raise ValidationError("layer selection is empty")
    missing = [lid for lid in chosen if lid not in available]
    if missing:
        raise ValidationError(f"layers {missing} not present in features (have {available})")
    return sorted(chosen)


def canonical_config(config: TrainConfig) -> str:
    """Stable key=value serialization; the digest and checkpoints embed this."""
    pairs: dict[str, object] = {}
    for f in fields(TrainConfig):
        if f.name == "loss_weights":
            continue
        pairs[f.name] = getattr(config, f.name)
    for f in fields(LossWeights):
        pairs[f.name] = getattr(config.loss_weights, f.name)
    lines = []
    for key in sorted(pairs):
        value = pairs[key]
        text = repr(float(value)) if isinstance(value, float) else str(value)
        lines.append(f"{key}={text}")
    return "\n".join(lines)


def config_digest(config: TrainConfig) -> str:
    return hashlib.sha256(canonical_config(config).encode("utf-8")).hexdigest()


def save_checkpoint(
    path: str | Path,
    params: ModelParams,
    state: OptimizerState,
    epoch: int,
    config: TrainConfig,
    shuffle_state: dict,
) -> None:
    """Atomic (write-then-rename) float64 checkpoint with optimizer state."""
    container = TensorContainer(
        metadata={
            "kind": "checkpoint",
            "epoch": str(epoch),
            "step": str(state.t),
            "config_digest": config_digest(config),
            "config": canonical_config(config),
            "shuffle_state": json.dumps(shuffle_state, sort_keys=True),
        }
    )
    for name, arr in params.named_tensors():
        container.add(name, arr.astype(np.float64))
    for name, _ in params.named_tensors():
        container.add(f"opt/{name}/m", state.m[name].astype(np.float64))
        container.add(f"opt/{name}/v", state.v[name].astype(np.float64))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    write_container(tmp, container)
    os.replace(tmp, path)


def params_from_container(container: TensorContainer) -> ModelParams:
    """Rebuild ModelParams from checkpoint tensor names."""
    layer_ids = sorted(
        {int(name.split("/")[0][5:]) for name in container.entries if name.startswith("layer")}
    )
    if not layer_ids:
        raise ValidationError("checkpoint holds no adapter tensors")

    def branch(lid: int, code: str) -> AdapterParams:
        take = lambda t: container.require(f"layer{lid}/{code}/{t}").astype(np.float64)
        return AdapterParams(
            w1=take("W1"), b1=take("b1"), w2=take("W2"), b2=take("b2"),
            w3=take("W3"), b3=take("b3"), w4=take("W4"), b4=take("b4"),
        )

    adapters = {lid: BranchAdapters(branch(lid, "n"), branch(lid, "a")) for lid in layer_ids}
    w_proj = container.require("router/W_proj").astype(np.float64)
    return ModelParams(adapters=adapters, w_proj=w_proj)


def load_checkpoint(path: str | Path) -> tuple[ModelParams, TensorContainer]:
    container = read_container(path)
    if container.kind() != "checkpoint":
        raise ValidationError(f"expected kind=checkpoint container, got {container.kind()!r}")
    return params_from_container(container), container


@dataclass
class TrainResult:
    params: ModelParams
    state: OptimizerState
    rows: list[dict]
    layer_ids: list[int]


def _format_cell(value: float | int | str) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_epoch_csv(path: str | Path, rows: list[dict]) -> None:
    lines = [",".join(CSV_COLUMNS)]
    for row in rows:
        lines.append(",".join(_format_cell(row[col]) for col in CSV_COLUMNS))
    Path(path).write_text("\n".join(lines) + "\n")


def train(
    config: TrainConfig,
    records: list[FeatureRecord],
    bank: TextBank,
    out_dir: str | Path | None = None,
    resume_from: str | Path | None = None,
) -> TrainResult:
    """Run (or continue) the training loop; returns final params and epoch log."""
    config.validate()
    labels = [rec.label for rec in records]
    if len(set(labels)) < 2:
        warnings.warn(
            "dataset holds a single label value; routing targets are degenerate",
            stacklevel=2,
        )
    layer_ids = resolve_layers(config.layers, records[0].layer_ids)
    d_vis = records[0].d_vis
    d_text = bank.d_text
    n = len(records)
    weights = config.loss_weights

    params = init_model(config.seed, d_vis, d_text, config.d_b, layer_ids)
    state = OptimizerState.for_params(params, lr=config.lr)
    shuffle_rng = np.random.default_rng([config.seed, 3])
    start_epoch = 0
    rows: list[dict] = []

    if resume_from is not None:
        params, container = load_checkpoint(resume_from)
        meta = container.metadata
        if meta.get("config_digest") != config_digest(config):
            raise ValidationError(
                "checkpoint config digest does not match the supplied config"
            )
        if params.layer_ids != layer_ids or params.d_vis != d_vis or params.d_text != d_text:
            raise ValidationError("checkpoint dimensions do not match the dataset")
        state = OptimizerState.for_params(params, lr=config.lr)
        for name, _ in params.named_tensors():
            state.m[name] = container.require(f"opt/{name}/m").astype(np.float64)
            state.v[name] = container.require(f"opt/{name}/v").astype(np.float64)
        state.t = int(meta["step"])
        params.version = state.t
        shuffle_rng.bit_generator.state = json.loads(meta["shuffle_state"])
        start_epoch = int(meta["epoch"])

    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    def checkpoint(epoch_done: int, name: str) -> None:
        if out_path is None:
            return
        save_checkpoint(
            out_path / name, params, state, epoch_done, config,
            shuffle_rng.bit_generator.state,
        )

    for epoch in range(start_epoch, config.epochs):
        perm = shuffle_rng.permutation(n)
        epoch_sums = np.zeros(4)
        wn_sum = wn_count = wa_sum = wa_count = 0.0
        for batch_index, lo in enumerate(range(0, n, config.batch_size)):
            batch = perm[lo : lo + config.batch_size]
            grads = params.zeros_like()
            batch_sums = np.zeros(4)
            for idx in batch:
                rec = records[int(idx)]
                _, decision, cache = forward_image(rec, params, bank, config.tau)
                terms, image_grads = image_loss_gradients(params, cache, weights)
                batch_sums += terms
                grads.add_scaled(image_grads, 1.0)
                if rec.label == 0:
                    wn_sum += decision.w_normal
                    wn_count += 1
                else:
                    wa_sum += decision.w_anomaly
                    wa_count += 1
            scale = 1.0 / len(batch)
            for _, arr in grads.named_tensors():
                arr *= scale
            batch_mean = batch_sums * scale
            breakdown = total_loss(*batch_mean.tolist(), weights)
            if not np.isfinite(breakdown.total):
                raise NumericalAbort(
                    f"non-finite loss at epoch {epoch} batch {batch_index}",
                    epoch=epoch,
                    batch_index=batch_index,
                )
            epoch_sums += batch_sums
            adamw_step(params, grads, state)
            if not params.is_finite():
                raise NumericalAbort(
                    f"non-finite parameter after epoch {epoch} batch {batch_index}",
                    epoch=epoch,
                    batch_index=batch_index,
                )
        epoch_mean = epoch_sums / n
        breakdown = total_loss(*epoch_mean.tolist(), weights)
        rows.append(
            {
                "epoch": epoch + 1,
                "focal": breakdown.focal,
                "dice": breakdown.dice,
                "seg": breakdown.seg,
                "global": breakdown.global_,
                "routing": breakdown.routing,
                "total": breakdown.total,
                "mean_wn_normal": wn_sum / wn_count if wn_count else float("nan"),
                "mean_wa_anomaly": wa_sum / wa_count if wa_count else float("nan"),
            }
        )
        if config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            checkpoint(epoch + 1, f"checkpoint_ep{epoch + 1:04d}.avaf")

    checkpoint(config.epochs, "checkpoint_final.avaf")
    if out_path is not None:
        write_epoch_csv(out_path / "train_log.csv", rows)
    return TrainResult(params=params, state=state, rows=rows, layer_ids=layer_ids)


def resume(
    checkpoint_path: str | Path,
    config: TrainConfig,
    records: list[FeatureRecord],
    bank: TextBank,
    out_dir: str | Path | None = None,
) -> TrainResult:
    """Continue training from a checkpoint written by :func:`train`."""
    return train(config, records, bank, out_dir=out_dir, resume_from=checkpoint_path)


def epoch_breakdown(row: dict) -> LossBreakdown:
    return LossBreakdown(
        focal=row["focal"],
        dice=row["dice"],
        seg=row["seg"],
        global_=row["global"],
        routing=row["routing"],
        total=row["total"],
    )
