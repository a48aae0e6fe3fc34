"""Metric implementations against deliberately dumb brute-force oracles."""

import math

import numpy as np
import pytest

from latentset import metrics as M
from latentset.errors import ShapeError


# ---------------------------------------------------------------------------
# Brute-force reference implementations (independent of the library's code
# paths: plain python loops, no shared helpers).
# ---------------------------------------------------------------------------


def ece_oracle(labels, probs, bins=15):
    labels = list(labels)
    if np.ndim(probs) == 1:
        conf = [max(p, 1 - p) for p in probs]
        pred = [1 if p >= 0.5 else 0 for p in probs]
    else:
        conf = [max(row) for row in probs]
        pred = [int(np.argmax(row)) for row in probs]
    n = len(labels)
    total = 0.0
    for b in range(bins):
        lo, hi = b / bins, (b + 1) / bins
        members = [i for i in range(n)
                   if (lo <= conf[i] < hi) or (b == bins - 1 and conf[i] == 1.0)]
        if not members:
            continue
        acc = sum(1.0 for i in members if pred[i] == labels[i]) / len(members)
        avg_conf = sum(conf[i] for i in members) / len(members)
        total += (len(members) / n) * abs(acc - avg_conf)
    return total


def auroc_oracle(labels, scores):
    pos = [s for y, s in zip(labels, scores) if y == 1]
    neg = [s for y, s in zip(labels, scores) if y == 0]
    total = 0.0
    for sp in pos:
        for sn in neg:
            if sp > sn:
                total += 1.0
            elif sp == sn:
                total += 0.5
    return total / (len(pos) * len(neg))


def auprc_oracle(labels, scores):
    n_pos = sum(1 for y in labels if y == 1)
    thresholds = sorted(set(scores), reverse=True)
    ap = 0.0
    prev_recall = 0.0
    for t in thresholds:
        tp = sum(1 for y, s in zip(labels, scores) if s >= t and y == 1)
        fp = sum(1 for y, s in zip(labels, scores) if s >= t and y == 0)
        precision = tp / (tp + fp)
        recall = tp / n_pos
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


def spearman_oracle(x, y):
    def ranks(v):
        order = sorted(range(len(v)), key=lambda i: v[i])
        r = [0.0] * len(v)
        i = 0
        while i < len(v):
            j = i
            while j + 1 < len(v) and v[order[j + 1]] == v[order[i]]:
                j += 1
            avg = (i + j + 2) / 2.0
            for k in range(i, j + 1):
                r[order[k]] = avg
            i = j + 1
        return r

    rx, ry = ranks(list(x)), ranks(list(y))
    mx, my = sum(rx) / len(rx), sum(ry) / len(ry)
    num = sum((a - mx) * (b - my) for a, b in zip(rx, ry))
    den = math.sqrt(sum((a - mx) ** 2 for a in rx) * sum((b - my) ** 2 for b in ry))
    return None if den == 0 else num / den


def random_fixture(rng, n):
    labels = rng.integers(0, 2, size=n)
    if not labels.any():
        labels[rng.integers(n)] = 1
    if labels.all():
        labels[rng.integers(n)] = 0
    # quantized scores force plenty of ties
    scores = np.round(rng.random(n), 2)
    return labels.astype(np.int64), scores


class TestECE:
    def test_confident_and_correct_is_zero(self):
        labels = np.ones(5, dtype=int)
        probs = np.ones(5)
        assert M.ece(labels, probs) == 0.0

    def test_single_bin_hand_case(self):
        labels = np.array([1] * 8 + [0] * 2)
        probs = np.full(10, 0.8)
        assert M.ece(labels, probs) == pytest.approx(0.0, abs=1e-15)

    def test_matches_oracle_binary_and_multiclass(self):
        rng = np.random.default_rng(0)
        for _ in range(40):
            n = int(rng.integers(1, 51))
            labels, scores = random_fixture(rng, n)
            assert M.ece(labels, scores) == pytest.approx(
                ece_oracle(labels, scores), abs=1e-12
            )
            probs = rng.random((n, 3))
            probs /= probs.sum(axis=1, keepdims=True)
            multi = rng.integers(0, 3, size=n)
            assert M.ece(multi, probs) == pytest.approx(
                ece_oracle(multi, probs), abs=1e-12
            )

    def test_empty_rejected(self):
        with pytest.raises(ShapeError, match="non-empty"):
            M.ece(np.array([]), np.array([]))


class TestAUROC:
    def test_perfect_separation(self):
        assert M.auroc([0, 0, 1, 1], [0.1, 0.2, 0.8, 0.9]) == 1.0

    def test_all_ties_is_half(self):
        assert M.auroc([0, 1, 0, 1], [0.3, 0.3, 0.3, 0.3]) == 0.5

    def test_matches_pairwise_oracle_exactly(self):
        rng = np.random.default_rng(1)
        for _ in range(60):
            labels, scores = random_fixture(rng, int(rng.integers(2, 51)))
            assert M.auroc(labels, scores) == auroc_oracle(labels, scores)

    def test_single_class_rejected(self):
        with pytest.raises(ShapeError, match="both classes"):
            M.auroc([1, 1], [0.2, 0.4])


class TestAUPRC:
    def test_perfect_separation(self):
        assert M.auprc([0, 0, 1, 1], [0.1, 0.2, 0.8, 0.9]) == 1.0

    def test_matches_threshold_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(60):
            labels, scores = random_fixture(rng, int(rng.integers(2, 51)))
            assert M.auprc(labels, scores) == pytest.approx(
                auprc_oracle(labels, scores), abs=1e-12
            )

    def test_no_positives_rejected(self):
        with pytest.raises(ShapeError, match="positive"):
            M.auprc([0, 0], [0.2, 0.4])


class TestNLLAndMSE:
    def test_perfect_probs_below_clip_floor(self):
        assert M.nll([1, 0], [1.0, 0.0]) <= 1e-11

    def test_half_prob_is_log_two(self):
        assert M.nll([1], [0.5]) == pytest.approx(math.log(2.0), rel=1e-12)

    def test_mse_zero_and_value(self):
        assert M.mse([1.0, 2.0], [1.0, 2.0]) == 0.0
        assert M.mse([0.0, 0.0], [1.0, 3.0]) == pytest.approx(5.0, rel=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ShapeError, match="mismatch"):
            M.nll([1, 0], [0.5])
        with pytest.raises(ShapeError, match="mismatch"):
            M.mse([1.0], [0.5, 0.2])


class TestMMD:
    def test_self_comparison_nonpositive(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(30, 4))
        est = M.mmd(x, x)
        assert not est.biased
        assert est.value <= 1e-12

    def test_separated_clouds(self):
        rng = np.random.default_rng(4)
        a = rng.normal(size=(100, 3))
        b = rng.normal(size=(100, 3)) + 10.0
        assert M.mmd(a, b).value > 0.5

    def test_rigid_rotation_invariance(self):
        rng = np.random.default_rng(5)
        a = rng.normal(size=(40, 3))
        b = rng.normal(size=(40, 3)) + 1.0
        q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        base = M.mmd(a, b).value
        rotated = M.mmd(a @ q, b @ q).value
        assert abs(base - rotated) < 1e-9

    def test_identical_distribution_concentration(self):
        n = 200
        bound = 5.0 / math.sqrt(n)
        for seed in range(20):
            rng = np.random.default_rng(1000 + seed)
            a = rng.normal(size=(n, 4))
            b = rng.normal(size=(n, 4))
            assert abs(M.mmd(a, b).value) < bound

    def test_singleton_falls_back_to_biased(self):
        rng = np.random.default_rng(6)
        est = M.mmd(rng.normal(size=(1, 3)), rng.normal(size=(10, 3)))
        assert est.biased

    def test_empty_rejected(self):
        with pytest.raises(ShapeError, match="non-empty"):
            M.mmd(np.zeros((0, 3)), np.zeros((5, 3)))


class TestSpearman:
    def test_self_correlation_is_one(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=10)
        assert M.spearman(x, x) == pytest.approx(1.0, abs=1e-12)

    def test_matches_oracle_on_fixtures(self):
        rng = np.random.default_rng(8)
        for _ in range(40):
            n = int(rng.integers(3, 51))
            x = np.round(rng.random(n), 1)
            y = np.round(rng.random(n), 1)
            ours = M.spearman(x, y)
            ref = spearman_oracle(x, y)
            if ref is None:
                assert ours is None
            else:
                assert ours == pytest.approx(ref, abs=1e-12)

    def test_constant_input_is_undefined(self):
        assert M.spearman(np.ones(5), np.arange(5.0)) is None

    def test_ten_element_fixture(self):
        x = np.array([3.0, 1.0, 4.0, 1.0, 5.0, 9.0, 2.0, 6.0, 5.0, 3.0])
        y = np.array([2.0, 7.0, 1.0, 8.0, 2.0, 8.0, 1.0, 8.0, 2.0, 8.0])
        assert M.spearman(x, y) == pytest.approx(spearman_oracle(x, y), abs=1e-12)


class TestMetricsReport:
    def test_json_round_trip_and_csv(self):
        rep = M.MetricsReport(metrics={"auroc": 0.75, "gap": None}, meta={"seed": 3})
        text = rep.to_json()
        assert '"auroc": 0.75' in text
        row = rep.csv_row(["auroc", "gap", "seed"])
        assert row == "0.75,,3"
