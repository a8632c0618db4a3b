import numpy as np
import pytest
from conftest import make_bank, make_record

from anoroute.fusion_scorer import init_model
from anoroute.metrics import auroc, evaluate, max_f1, pixel_auroc


def brute_force_auroc(scores, labels):
    """Pair-enumeration oracle: wins + half credit for ties."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


def brute_force_max_f1(scores, labels):
    """Exhaustive sweep over midpoints and sentinels; ties to larger threshold."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    distinct = np.unique(scores)
    candidates = [float("-inf"), float("inf")]
    candidates += [0.5 * (a + b) for a, b in zip(distinct[:-1], distinct[1:])]
    best = (0.0, float("inf"))
    n_pos = labels.sum()
    for thr in candidates:
        pred = scores >= thr
        tp = int(np.sum(pred & (labels == 1)))
        fp = int(np.sum(pred & (labels == 0)))
        fn = int(n_pos - tp)
        f1 = 2.0 * tp / (2.0 * tp + fp + fn) if tp else 0.0
        if f1 > best[0] or (f1 == best[0] and thr > best[1]):
            best = (f1, thr)
    return best


class TestAuroc:
    def test_perfect_separation(self):
        assert auroc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0

    def test_inverted_labels(self):
        assert auroc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0

    def test_tie_handling_hand_case(self):
        assert auroc([0.5, 0.5, 0.5, 0.4], [1, 0, 1, 0]) == 0.75

    def test_single_class_rejected(self):
        with pytest.raises(ValueError):
            auroc([0.1, 0.2], [1, 1])

    def test_matches_brute_force_with_ties(self):
        rng = np.random.default_rng(0)
        for trial in range(60):
            n = int(rng.integers(2, 200))
            labels = rng.integers(0, 2, size=n)
            if labels.min() == labels.max():
                labels[0] = 1 - labels[0]
            scores = np.round(rng.uniform(size=n), 2)  # quantized -> many ties
            assert auroc(scores, labels) == brute_force_auroc(scores, labels)

    def test_invariant_under_monotone_transform(self):
        rng = np.random.default_rng(1)
        scores = np.round(rng.normal(size=50), 1)
        labels = rng.integers(0, 2, size=50)
        labels[0], labels[1] = 0, 1
        base = auroc(scores, labels)
        assert auroc(3.0 * scores + 7.0, labels) == base
        assert auroc(np.exp(scores), labels) == base

    def test_complement_identity(self):
        rng = np.random.default_rng(2)
        scores = np.round(rng.uniform(size=40), 2)
        labels = rng.integers(0, 2, size=40)
        labels[0], labels[1] = 0, 1
        assert auroc(scores, labels) + auroc(scores, 1 - labels) == pytest.approx(1.0, abs=1e-12)


class TestPixelAuroc:
    def test_maps_equal_masks(self):
        rng = np.random.default_rng(3)
        masks = [(rng.uniform(size=(4, 4)) < 0.3).astype(np.uint8) for _ in range(3)]
        masks[0][0, 0] = 1
        masks[1][0, 0] = 0
        assert pixel_auroc([m.astype(float) for m in masks], masks) == 1.0

    def test_inverted_maps(self):
        rng = np.random.default_rng(4)
        masks = [(rng.uniform(size=(4, 4)) < 0.3).astype(np.uint8) for _ in range(2)]
        masks[0][0, 0] = 1
        masks[1][0, 0] = 0
        assert pixel_auroc([1.0 - m for m in masks], masks) == 0.0

    def test_toy_grid(self):
        mask = np.array([[1, 0], [1, 0]], dtype=np.uint8)
        amap = np.array([[0.9, 0.1], [0.6, 0.2]])
        assert pixel_auroc([amap], [mask]) == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            pixel_auroc([np.zeros((2, 2))], [np.zeros((3, 3), dtype=np.uint8)])


class TestMaxF1:
    def test_perfect(self):
        f1, thr = max_f1([0.9, 0.1], [1, 0])
        assert f1 == 1.0
        assert 0.1 < thr <= 0.9

    def test_all_positive_labels(self):
        f1, thr = max_f1([0.3, 0.7, 0.1], [1, 1, 1])
        assert f1 == 1.0
        assert thr == float("-inf")

    def test_hand_case(self):
        f1, thr = max_f1([0.8, 0.6, 0.4], [1, 0, 1])
        assert f1 == pytest.approx(0.8, abs=1e-12)
        assert thr < 0.4

    def test_no_positives_rejected(self):
        with pytest.raises(ValueError):
            max_f1([0.5, 0.6], [0, 0])

    def test_matches_exhaustive_sweep(self):
        rng = np.random.default_rng(5)
        for trial in range(60):
            n = int(rng.integers(1, 200))
            labels = rng.integers(0, 2, size=n)
            labels[int(rng.integers(0, n))] = 1
            scores = np.round(rng.uniform(size=n), 2)
            got = max_f1(scores, labels)
            want = brute_force_max_f1(scores, labels)
            assert got[0] == want[0]
            assert got[1] == want[1]


class TestEvaluate:
    def build(self, labels_by_class, seed=0):
        rng = np.random.default_rng(seed)
        records = []
        index = 0
        for class_id, labels in enumerate(labels_by_class):
            for label in labels:
                records.append(
                    make_record(
                        rng, index=index, class_id=class_id, label=label,
                        n_patches=16, d_vis=8,
                    )
                )
                index += 1
        bank = make_bank(rng, n_classes=len(labels_by_class), d_text=6)
        params = init_model(seed, 8, 6, 4, [1, 2])
        return records, params, bank

    def test_constant_model_gives_half_auroc(self):
        # Fresh model with zero adapters scores every patch from raw features;
        # force exact constancy by zeroing the projection too.
        records, params, bank = self.build([[0, 1, 0, 1]])
        params.w_proj[:] = 0.0
        report = evaluate(records, params, bank, tau=0.1)
        cm = report.per_class[0]
        assert cm.i_auc == 0.5
        assert cm.p_auc == 0.5

    def test_single_class_images_reports_na(self):
        records, params, bank = self.build([[1, 1, 1]])
        report = evaluate(records, params, bank, tau=0.1)
        cm = report.per_class[0]
        assert cm.i_auc is None
        assert "I-AUC" in cm.notice
        assert report.mean_i_auc is None

    def test_per_class_rows_and_mean(self):
        records, params, bank = self.build([[0, 1, 1, 0], [1, 0, 1, 0]], seed=3)
        report = evaluate(records, params, bank, tau=0.1)
        assert [cm.class_id for cm in report.per_class] == [0, 1]
        vals = [cm.p_auc for cm in report.per_class]
        assert report.mean_p_auc == pytest.approx(np.mean(vals))

    def test_threads_do_not_change_results(self):
        records, params, bank = self.build([[0, 1, 1, 0]], seed=4)
        a = evaluate(records, params, bank, tau=0.1, threads=1)
        b = evaluate(records, params, bank, tau=0.1, threads=4)
        assert a.per_class[0].p_auc == b.per_class[0].p_auc
        assert a.per_class[0].i_auc == b.per_class[0].i_auc

    def test_layer_subset(self):
        records, params, bank = self.build([[0, 1, 0, 1]], seed=5)
        full = evaluate(records, params, bank, tau=0.1)
        single = evaluate(records, params, bank, tau=0.1, layer_ids=[1])
        assert full.per_class[0].n_images == single.per_class[0].n_images
        with pytest.raises(ValueError):
            evaluate(records, params, bank, tau=0.1, layer_ids=[9])

    def test_csv_report(self, tmp_path):
        records, params, bank = self.build([[0, 1, 0, 1]], seed=6)
        report = evaluate(records, params, bank, tau=0.1)
        path = tmp_path / "report.csv"
        report.to_csv(path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "class,i_auc,p_auc,pixel_f1"
        assert lines[-1].startswith("mean,")
        assert len(lines) == 3
