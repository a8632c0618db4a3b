"""Acceptance suite: one test per gate criterion, one PASS/FAIL line each.

The training-based criteria run the full default pipeline (20 epochs,
lr 1e-4, batch 64, loss weights (0.5, 0.25, 0.1), temperature 0.1) on the
default synthetic dataset through an AVAF file round-trip, exactly as the
CLI does. Heavy runs are shared across criteria via session fixtures.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import pytest
from conftest import full_graph_fd_check
from test_metrics import brute_force_auroc, brute_force_max_f1

from anoroute.cli import main
from anoroute.fusion_scorer import forward_image
from anoroute.losses import LossWeights, dice_loss, focal_loss, routing_loss, total_loss
from anoroute.metrics import auroc, evaluate, max_f1
from anoroute.synth_data import SynthConfig, generate
from anoroute.tensor_store import (
    TensorContainer,
    containers_equal,
    features_to_container,
    load_dataset,
    read_container,
    textbank_to_container,
    write_container,
)
from anoroute.trainer import TrainConfig, train
from anoroute.text_router import route


def criterion(name: str, ok: bool, detail: str = "") -> None:
    print(f"\n{'PASS' if ok else 'FAIL'}: {name}" + (f" [{detail}]" if detail else ""))
    assert ok, f"{name}: {detail}"


@dataclass
class TrainedRun:
    params: object
    rows: list
    tau: float
    wn_normal: float
    wa_anomaly: float
    p_auc: float
    i_auc: float


@pytest.fixture(scope="session")
def default_dataset(tmp_path_factory):
    """Default synthetic train/test/text triple, through the file format."""
    out = tmp_path_factory.mktemp("data")
    train_records, bank = generate(SynthConfig())
    test_records, _ = generate(SynthConfig(data_seed=SynthConfig().data_seed + 1))
    write_container(out / "train.avaf", features_to_container(train_records))
    write_container(out / "test.avaf", features_to_container(test_records))
    write_container(out / "text.avaf", textbank_to_container(bank))
    train_loaded, bank_loaded = load_dataset(out / "train.avaf", out / "text.avaf")
    test_loaded, _ = load_dataset(out / "test.avaf", out / "text.avaf")
    return out, train_loaded, test_loaded, bank_loaded


def run_default_training(records, test_records, bank, loss_weights=None) -> TrainedRun:
    config = TrainConfig()
    if loss_weights is not None:
        config.loss_weights = loss_weights
    result = train(config, records, bank)
    wn, wa = [], []
    for rec in test_records:
        _, decision, _ = forward_image(rec, result.params, bank, config.tau)
        if rec.label == 0:
            wn.append(decision.w_normal)
        else:
            wa.append(decision.w_anomaly)
    report = evaluate(test_records, result.params, bank, config.tau)
    return TrainedRun(
        params=result.params,
        rows=result.rows,
        tau=config.tau,
        wn_normal=float(np.mean(wn)),
        wa_anomaly=float(np.mean(wa)),
        p_auc=report.mean_p_auc,
        i_auc=report.mean_i_auc,
    )


@pytest.fixture(scope="session")
def paper_config_run(default_dataset) -> TrainedRun:
    _, train_records, test_records, bank = default_dataset
    return run_default_training(train_records, test_records, bank)


@pytest.fixture(scope="session")
def no_routing_run(default_dataset) -> TrainedRun:
    _, train_records, test_records, bank = default_dataset
    return run_default_training(
        train_records, test_records, bank, LossWeights(lambda3=0.0)
    )


class TestGradientSuite:
    def test_full_graph_gradients(self):
        # Five random small instances (D_vis=8, d_b=4, D_text=6, N=4, L=2, B=2),
        # every parameter coordinate probed. Coordinates whose FD magnitude
        # sits below the central-difference float64 noise floor are held to
        # an absolute bound of 1e-9 instead of the relative one.
        started = time.monotonic()
        worst_rel = worst_abs = 0.0
        for seed in (7, 8, 9, 10, 11):
            rel, abs_err, kink_gap = full_graph_fd_check(seed, coords_per_tensor=0)
            assert kink_gap > 1e-3, f"seed {seed} probes too close to a LeakyReLU kink"
            worst_rel = max(worst_rel, rel)
            worst_abs = max(worst_abs, abs_err)
        elapsed = time.monotonic() - started
        ok = worst_rel < 1e-5 and elapsed < 60.0
        criterion(
            "gradient suite: analytic vs central differences on 5 instances",
            ok,
            f"max rel {worst_rel:.2e}, max abs {worst_abs:.2e}, {elapsed:.1f}s",
        )


class TestRoutingSoftmaxOracle:
    def test_routing_oracle_and_temperature_limits(self):
        f_cls = np.array([1.0, 0.0, 0.0])
        t_n = np.array([0.8, 0.6, 0.0])   # cos = 0.8
        t_a = np.array([0.6, 0.0, 0.8])   # cos = 0.6
        decision, _ = route(f_cls, t_n, t_a, tau=0.1)
        oracle_ok = (
            abs(decision.w_normal - 0.880797) < 1e-6
            and abs(decision.w_anomaly - 0.119203) < 1e-6
        )
        flat, _ = route(f_cls, t_n, t_a, tau=1e6)
        flat_ok = abs(flat.w_normal - 0.5) < 1e-6 and abs(flat.w_anomaly - 0.5) < 1e-6
        sharp, _ = route(f_cls, t_n, t_a, tau=1e-4)
        sharp_ok = sharp.w_normal > 1.0 - 1e-9 and sharp.w_anomaly < 1e-9
        ok = oracle_ok and flat_ok and sharp_ok
        criterion(
            "routing softmax oracle: (0.880797, 0.119203) and temperature limits",
            ok,
            f"w=({decision.w_normal:.6f}, {decision.w_anomaly:.6f})",
        )


class TestLossIdentities:
    def test_loss_identities(self):
        rng = np.random.default_rng(0)
        mask = (rng.uniform(size=(8, 8)) < 0.3).astype(np.uint8)
        dice_ok = dice_loss(mask.astype(float), mask) == 0.0
        focal_value = focal_loss(mask.astype(float), mask)
        focal_ok = focal_value < 1e-4
        routing_ok = routing_loss(0.5, 0.5, 1) == 0.5 and routing_loss(0.5, 0.5, 0) == 0.5
        breakdown = total_loss(0.5, 0.5, 1.0, 1.0, LossWeights())
        total_ok = breakdown.total == 0.85 and breakdown.total == 0.5 * 1 + 0.25 * 1 + 0.1 * 1
        ok = dice_ok and focal_ok and routing_ok and total_ok
        criterion(
            "loss identities: dice(P=M)=0, focal(P=M)<1e-4, routing=0.5, total=0.85",
            ok,
            f"focal {focal_value:.2e}, total {breakdown.total!r}",
        )


class TestRoutingSpecialization:
    def test_table4_analogue_routing_means(self, paper_config_run):
        run = paper_config_run
        ok = run.wn_normal > 0.7 and run.wa_anomaly > 0.7
        criterion(
            "routing specialization: mean w_n(normal) > 0.7 and mean w_a(anomaly) > 0.7",
            ok,
            f"w_n(normal)={run.wn_normal:.3f}, w_a(anomaly)={run.wa_anomaly:.3f}",
        )

    def test_monotone_loss_trend(self, paper_config_run):
        rows = paper_config_run.rows
        ok = rows[-1]["total"] < rows[0]["total"]
        criterion(
            "monotone trend: epoch-20 mean total loss below epoch 1",
            ok,
            f"{rows[0]['total']:.4f} -> {rows[-1]['total']:.4f}",
        )


class TestRoutingCollapse:
    def test_table2_analogue_collapse_band(self, no_routing_run):
        run = no_routing_run
        ok = 0.35 <= run.wn_normal <= 0.65 and 0.35 <= run.wa_anomaly <= 0.65
        criterion(
            "routing collapse without regularizer: both means within [0.35, 0.65]",
            ok,
            f"w_n(normal)={run.wn_normal:.3f}, w_a(anomaly)={run.wa_anomaly:.3f}",
        )

    def test_table2_analogue_strict_dominance(self, paper_config_run, no_routing_run):
        ok = paper_config_run.p_auc > no_routing_run.p_auc
        criterion(
            "regularized run strictly dominates on P-AUC",
            ok,
            f"{paper_config_run.p_auc:.5f} vs {no_routing_run.p_auc:.5f}",
        )


class TestMultiLayerAggregation:
    def test_table3_analogue(self):
        started = time.monotonic()
        wins = 0
        details = []
        for seed in range(5):
            train_records, bank = generate(SynthConfig(data_seed=2 * seed + 10))
            test_records, _ = generate(SynthConfig(data_seed=2 * seed + 11))
            config = TrainConfig(seed=seed)
            result = train(config, train_records, bank)
            multi = evaluate(test_records, result.params, bank, config.tau).mean_p_auc
            singles = [
                evaluate(test_records, result.params, bank, config.tau, layer_ids=[lid]).mean_p_auc
                for lid in (1, 2)
            ]
            win = multi >= max(singles)
            wins += win
            details.append(f"s{seed}:{'+' if win else '-'}")
        elapsed = time.monotonic() - started
        ok = wins >= 3 and elapsed < 600.0
        criterion(
            "multi-layer aggregation >= best single layer on >=3 of 5 seeds",
            ok,
            f"{wins}/5 ({' '.join(details)}), {elapsed:.0f}s",
        )


class TestMetricsOracle:
    def test_auroc_and_f1_match_brute_force(self):
        started = time.monotonic()
        rng = np.random.default_rng(123)
        for trial in range(100):
            n = int(rng.integers(2, 201))
            labels = rng.integers(0, 2, size=n)
            if labels.min() == labels.max():
                labels[0] = 1 - labels[0]
            scores = np.round(rng.uniform(size=n), 2)
            assert auroc(scores, labels) == brute_force_auroc(scores, labels)
            if labels.sum() > 0:
                got = max_f1(scores, labels)
                want = brute_force_max_f1(scores, labels)
                assert got == want
        elapsed = time.monotonic() - started
        criterion(
            "metrics oracle: rank AUROC and max-F1 equal brute force on 100 instances",
            elapsed < 60.0,
            f"{elapsed:.1f}s",
        )


class TestEndToEndDetection:
    def test_detection_quality(self, paper_config_run):
        run = paper_config_run
        ok = run.p_auc > 0.9 and run.i_auc > 0.9
        criterion(
            "end-to-end detection: pixel-AUROC > 0.9 and image-AUROC > 0.9",
            ok,
            f"P-AUC={run.p_auc:.4f}, I-AUC={run.i_auc:.4f}",
        )


TRAIN_CFG_10_EPOCHS = "epochs = 10\ncheckpoint_every = 5\n"


class TestDeterminism:
    def test_identical_runs_and_resume(self, default_dataset, tmp_path):
        data_dir, *_ = default_dataset
        cfg = tmp_path / "train.cfg"
        cfg.write_text(TRAIN_CFG_10_EPOCHS)

        def run_train(out, extra=()):
            code = main([
                "train",
                "--features", str(data_dir / "train.avaf"),
                "--text", str(data_dir / "text.avaf"),
                "--config", str(cfg),
                "--out", str(out),
                *extra,
            ])
            assert code == 0

        run_a, run_b, run_c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
        run_train(run_a)
        run_train(run_b)
        identical = (
            (run_a / "checkpoint_final.avaf").read_bytes()
            == (run_b / "checkpoint_final.avaf").read_bytes()
            and (run_a / "train_log.csv").read_bytes() == (run_b / "train_log.csv").read_bytes()
        )
        run_train(run_c, ("--resume", str(run_a / "checkpoint_ep0005.avaf")))
        resumed_equal = (
            (run_a / "checkpoint_final.avaf").read_bytes()
            == (run_c / "checkpoint_final.avaf").read_bytes()
        )
        ok = identical and resumed_equal
        criterion(
            "determinism: identical runs bitwise-equal; resume(5) equals uninterrupted",
            ok,
            f"identical={identical}, resume={resumed_equal}",
        )


class TestFormatRoundTrip:
    def test_thousand_randomized_containers(self, tmp_path):
        rng = np.random.default_rng(2024)
        dtypes = [np.float32, np.float64, np.uint8]
        path = tmp_path / "c.avaf"
        for trial in range(1000):
            container = TensorContainer(
                metadata={f"k{i}": f"v{int(rng.integers(0, 1000))}" for i in range(int(rng.integers(0, 4)))}
            )
            for e in range(int(rng.integers(0, 6))):
                ndim = int(rng.integers(1, 4))
                shape = tuple(int(rng.integers(1, 6)) for _ in range(ndim))
                dt = dtypes[int(rng.integers(0, 3))]
                if dt is np.uint8:
                    arr = rng.integers(0, 256, size=shape).astype(dt)
                else:
                    arr = rng.normal(size=shape).astype(dt)
                container.add(f"t{e}", arr)
            write_container(path, container)
            back = read_container(path)
            assert containers_equal(container, back), f"trial {trial}"
        criterion("format round-trip: 1000 randomized containers bitwise-stable", True)
