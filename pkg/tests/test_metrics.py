import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from contextflow.metrics import (
    MMD_GAMMAS,
    CentroidClassifier,
    TransitionRuleSet,
    celltype_kl,
    count_implausible,
    energy_distance,
    metric_report,
    mmd_rbf_multi,
    w2,
    w2_report,
    weighted_w2,
    weighted_w2_report,
)


def brute_energy(X, Y):
    X, Y = X.tolist(), Y.tolist()
    mean = lambda A, B: sum(math.dist(a, b) for a in A for b in B) / (len(A) * len(B))
    return 2 * mean(X, Y) - mean(X, X) - mean(Y, Y)


def brute_mmd(X, Y, gammas=MMD_GAMMAS):
    X, Y = X.tolist(), Y.tolist()
    m, n = len(X), len(Y)
    vals = []
    for g in gammas:
        k = lambda a, b: math.exp(-g * math.dist(a, b) ** 2)
        xx = sum(k(X[i], X[j]) for i in range(m) for j in range(m) if i != j) / (m * (m - 1))
        yy = sum(k(Y[i], Y[j]) for i in range(n) for j in range(n) if i != j) / (n * (n - 1))
        xy = sum(k(a, b) for a in X for b in Y) / (m * n)
        vals.append(xx + yy - 2 * xy)
    return sum(vals) / len(vals)


def brute_w2(X, Y):
    """Equal-size uniform clouds: the optimum is a permutation."""
    X, Y = X.tolist(), Y.tolist()
    n = len(X)
    best = min(sum(math.dist(X[i], Y[p[i]]) ** 2 for i in range(n)) for p in itertools.permutations(range(n)))
    return math.sqrt(best / n)


clouds = st.integers(0, 2**31).map(np.random.default_rng)


class TestEnergy:
    def test_matches_brute_force(self, rng):
        for _ in range(10):
            X, Y = rng.standard_normal((rng.integers(1, 6), 3)), rng.standard_normal((rng.integers(1, 6), 3))
            assert energy_distance(X, Y) == pytest.approx(brute_energy(X, Y), abs=1e-10)

    def test_identical_multisets_give_exact_zero(self, rng):
        X = rng.standard_normal((5, 2))
        assert energy_distance(X, X[::-1]) == 0.0
        assert energy_distance(X, X[[2, 0, 4, 1, 3]]) == 0.0

    def test_singletons(self):
        assert energy_distance([[0.0, 0.0]], [[3.0, 4.0]]) == pytest.approx(10.0)

    @settings(max_examples=30, deadline=None)
    @given(clouds, st.integers(1, 5), st.integers(1, 5))
    def test_symmetric_nonnegative(self, g, m, n):
        X, Y = g.standard_normal((m, 2)), g.standard_normal((n, 2))
        assert energy_distance(X, Y) >= 0
        assert energy_distance(X, Y) == pytest.approx(energy_distance(Y, X), abs=1e-12)


class TestMMD:
    def test_matches_brute_force(self, rng):
        for _ in range(10):
            X, Y = rng.standard_normal((rng.integers(2, 6), 3)), rng.standard_normal((rng.integers(2, 6), 3))
            assert mmd_rbf_multi(X, Y) == pytest.approx(brute_mmd(X, Y), abs=1e-10)

    def test_single_gamma_two_points(self):
        # xx = yy = exp(-1), xy = (1 + 2 exp(-1) + exp(-4)) / 4 for the points 0, 1 vs 0, 2
        X, Y = np.array([[0.0], [1.0]]), np.array([[0.0], [2.0]])
        e = math.exp
        expected = e(-1) + e(-4) - 2 * (1 + e(-1) + e(-4) + e(-1)) / 4
        assert mmd_rbf_multi(X, Y, gammas=(1.0,)) == pytest.approx(expected, abs=1e-15)

    def test_needs_two_samples(self):
        with pytest.raises(ValueError):
            mmd_rbf_multi([[0.0]], [[1.0], [2.0]])


class TestW2:
    def test_matches_permutation_oracle(self, rng):
        for n in range(1, 6):
            X, Y = rng.standard_normal((n, 2)), rng.standard_normal((n, 2))
            assert w2(X, Y) == pytest.approx(brute_w2(X, Y), abs=1e-10)

    def test_shifted_singletons(self):
        assert w2([[1.0, 2.0]], [[4.0, 6.0]]) == pytest.approx(5.0, abs=1e-12)

    def test_unequal_sizes(self):
        # two points at 0 and 2 versus one at 1: every unit of mass moves distance 1
        assert w2([[0.0], [2.0]], [[1.0]]) == pytest.approx(1.0, abs=1e-10)

    def test_subsampling_is_reported_and_seeded(self, rng):
        X, Y = rng.standard_normal((30, 2)), rng.standard_normal((20, 2))
        rep = w2_report(X, Y, cap=10, seed=4)
        assert rep["subsampled"] and rep["n_x"] == 10 and rep["n_y"] == 10
        assert rep == w2_report(X, Y, cap=10, seed=4)
        assert not w2_report(X, Y)["subsampled"]

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            w2(np.zeros((2, 2)), np.zeros((2, 3)))

    @settings(max_examples=30, deadline=None)
    @given(clouds, st.integers(1, 5))
    def test_translation(self, g, n):
        X = g.standard_normal((n, 2))
        c = g.standard_normal(2)
        assert w2(X, X + c) == pytest.approx(np.linalg.norm(c), abs=1e-9)


class TestClassifierAndWeighted:
    def test_centroid_classifier(self):
        clf = CentroidClassifier.fit([[0.0], [2.0], [10.0]], ["a", "a", "b"])
        assert clf.classes == ["a", "b"]
        assert clf.predict([[0.5], [7.0]]).tolist() == ["a", "b"]

    def test_weighted_matches_hand_computation(self):
        X_true = np.array([[0.0], [1.0], [10.0], [11.0]])
        labels = np.array(["a", "a", "b", "b"], dtype=object)
        X_pred = np.array([[0.5], [1.5], [13.0], [14.0]])
        clf = CentroidClassifier.fit(X_true, labels)
        # class a shifts by 0.5, class b by 3; equal weights
        assert weighted_w2(X_true, labels, X_pred, clf) == pytest.approx(0.5 * 0.5 + 0.5 * 3.0, abs=1e-10)

    def test_missing_predicted_class_is_penalized(self):
        X_true = np.array([[0.0], [10.0], [11.0]])
        labels = np.array(["a", "b", "b"], dtype=object)
        X_pred = np.array([[9.0], [10.0], [12.0]])
        clf = CentroidClassifier.fit(X_true, labels)
        rep = weighted_w2_report(X_true, labels, X_pred, clf)
        a = next(c for c in rep["per_class"] if c["class"] == "a")
        assert a["penalized"] and a["n_pred"] == 0
        assert a["w2"] == pytest.approx(w2(X_true[:1], X_pred), abs=1e-12)

    def test_one_class_equals_w2(self, rng):
        X_true, X_pred = rng.standard_normal((7, 2)), rng.standard_normal((5, 2))
        labels = np.array(["a"] * 7, dtype=object)
        clf = CentroidClassifier.fit(X_true, labels)
        assert weighted_w2(X_true, labels, X_pred, clf) == pytest.approx(w2(X_true, X_pred), abs=1e-12)

    def test_requires_classifier(self):
        with pytest.raises(ValueError):
            weighted_w2(np.zeros((2, 1)), ["a", "b"], np.zeros((2, 1)), None)


class TestKL:
    def test_identical_histograms(self):
        assert celltype_kl(["a", "b"], ["b", "a"]) == pytest.approx(0.0, abs=1e-15)

    def test_hand_value(self):
        p = np.array([0.75, 0.25])
        q = np.array([0.25, 0.75])
        expected = float(np.sum(p * np.log(p / q)))
        assert celltype_kl(list("aaab"), list("abbb")) == pytest.approx(expected, rel=1e-7)

    def test_missing_predicted_class_stays_finite(self):
        val = celltype_kl(["a", "b"], ["a", "a"])
        assert np.isfinite(val) and val > 5

    def test_vocabulary(self):
        assert celltype_kl(["a"], ["a"], vocab=["a", "b"]) == pytest.approx(0.0, abs=1e-12)
        with pytest.raises(ValueError):
            celltype_kl(["a"], ["c"], vocab=["a", "b"])


class TestImplausible:
    def test_counts_only_forbidden_pairs(self, rng):
        plan = np.array([[0.5, 0.0], [0.0, 0.5]])
        rules = TransitionRuleSet.from_pairs([("x", "y")])
        assert count_implausible(plan, ["x", "y"], ["x", "y"], rules, 100, rng) == 0
        assert count_implausible(plan, ["x", "y"], ["y", "x"], rules, 100, rng) > 0

    def test_expected_rate(self):
        plan = np.full((2, 2), 0.25)
        rules = TransitionRuleSet.from_pairs([("x", "y")])
        N = 10000
        got = count_implausible(plan, ["x", "z"], ["y", "z"], rules, N, np.random.default_rng(0))
        assert abs(got / N - 0.25) < 3 * math.sqrt(0.25 * 0.75 / N)

    def test_empty_rules(self, rng):
        assert count_implausible(np.ones((1, 1)), ["a"], ["b"], TransitionRuleSet.from_pairs([]), 10, rng) == 0

    def test_shape_mismatch(self, rng):
        with pytest.raises(ValueError):
            count_implausible(np.ones((2, 2)) / 4, ["a"], ["b", "c"], TransitionRuleSet.from_pairs([]), 5, rng)


class TestReport:
    def test_all_metrics_serialize(self, rng):
        X, Y = rng.standard_normal((6, 2)), rng.standard_normal((6, 2))
        labels = np.array(["a", "b"] * 3, dtype=object)
        clf = CentroidClassifier.fit(Y, labels)
        rep = metric_report(X, Y, labels_true=labels, clf=clf)
        assert set(rep) == {"w2", "weighted_w2", "mmd", "energy", "kl"}
        assert rep["w2"]["value"] == pytest.approx(w2(X, Y))
        json.dumps(rep)

    @settings(max_examples=15, deadline=None)
    @given(clouds)
    def test_row_permutation_invariance(self, g):
        X, Y = g.standard_normal((6, 2)), g.standard_normal((5, 2))
        labels = np.array(["a", "b", "a", "b", "a"], dtype=object)
        clf = CentroidClassifier.fit(Y, labels)
        px, py = g.permutation(6), g.permutation(5)
        base = metric_report(X, Y, labels_true=labels, clf=clf)
        perm = metric_report(X[px], Y[py], labels_true=labels[py], clf=clf)
        for name in base:
            assert perm[name]["value"] == pytest.approx(base[name]["value"], abs=1e-10)

    def test_unknown_metric(self, rng):
        with pytest.raises(ValueError):
            metric_report(np.zeros((2, 1)), np.zeros((2, 1)), ["nope"])
