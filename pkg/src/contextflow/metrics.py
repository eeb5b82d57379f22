"""Distribution-level evaluation metrics.

All metrics take point clouds as (n, d) arrays. ``w2`` uses an exact
(unregularized) plan so reported distances carry no entropic bias.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from . import transport
from ._util import pairwise_dist, pairwise_sqdist

MMD_GAMMAS = (2.0, 1.0, 0.5, 0.1, 0.01, 0.005)
W2_CAP = 512
KL_PSEUDOCOUNT = 1e-8


def _as_cloud(X, name="X"):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError(f"{name} must be a nonempty (n, d) array")
    return X


def _subsample(X, cap, rng):
    if X.shape[0] <= cap:
        return X, False
    idx = np.sort(rng.choice(X.shape[0], size=cap, replace=False))
    return X[idx], True


def w2_report(X, Y, cap: int = W2_CAP, seed: int = 0) -> dict:
    X, Y = _as_cloud(X, "X"), _as_cloud(Y, "Y")
    if X.shape[1] != Y.shape[1]:
        raise ValueError(f"dimension mismatch: {X.shape[1]} vs {Y.shape[1]}")
    rng = np.random.default_rng(seed)
    Xs, sub_x = _subsample(X, cap, rng)
    Ys, sub_y = _subsample(Y, cap, rng)
    C = pairwise_sqdist(Xs, Ys)
    plan = transport.exact_ot(C, max_entries=cap * cap).plan
    value = math.sqrt(max(transport.transport_cost(plan, C), 0.0))
    return {"value": value, "n_x": Xs.shape[0], "n_y": Ys.shape[0],
            "subsampled": bool(sub_x or sub_y), "subsample_seed": seed}


def w2(X, Y, cap: int = W2_CAP, seed: int = 0) -> float:
    """2-Wasserstein distance between two empirical clouds with uniform weights."""
    return w2_report(X, Y, cap, seed)["value"]


def energy_distance(X, Y) -> float:
    """``2 E|X-Y| - E|X-X'| - E|Y-Y'|`` with V-statistic (i = i' included) means.

    Sums use ``math.fsum`` so the result does not depend on row order; an
    identical multiset in any order gives exactly 0.
    """
    X, Y = _as_cloud(X, "X"), _as_cloud(Y, "Y")
    m, n = X.shape[0], Y.shape[0]
    cross = math.fsum(pairwise_dist(X, Y).ravel()) / (m * n)
    within_x = math.fsum(pairwise_dist(X, X).ravel()) / (m * m)
    within_y = math.fsum(pairwise_dist(Y, Y).ravel()) / (n * n)
    # the population quantity is nonnegative; clip rounding residue
    return max(2.0 * cross - within_x - within_y, 0.0)


def mmd_rbf_multi(X, Y, gammas: Sequence[float] = MMD_GAMMAS) -> float:
    """Unbiased squared MMD averaged over RBF kernels ``exp(-gamma |x - y|^2)``."""
    X, Y = _as_cloud(X, "X"), _as_cloud(Y, "Y")
    m, n = X.shape[0], Y.shape[0]
    if m < 2 or n < 2:
        raise ValueError("the unbiased MMD estimator needs at least two samples per side")
    Dxx, Dyy, Dxy = pairwise_sqdist(X, X), pairwise_sqdist(Y, Y), pairwise_sqdist(X, Y)
    vals = []
    for g in gammas:
        Kxx, Kyy, Kxy = np.exp(-g * Dxx), np.exp(-g * Dyy), np.exp(-g * Dxy)
        xx = (Kxx.sum() - np.trace(Kxx)) / (m * (m - 1))
        yy = (Kyy.sum() - np.trace(Kyy)) / (n * (n - 1))
        vals.append(xx + yy - 2.0 * Kxy.mean())
    return float(np.mean(vals))


@dataclass
class CentroidClassifier:
    classes: list
    centroids: np.ndarray

    @classmethod
    def fit(cls, X, labels) -> "CentroidClassifier":
        X = _as_cloud(X)
        labels = np.asarray(labels, dtype=object)
        if labels.shape != (X.shape[0],):
            raise ValueError("one label per row required")
        classes = sorted(set(labels.tolist()), key=str)
        if not classes:
            raise ValueError("need at least one class")
        cents = np.stack([X[labels == c].mean(axis=0) for c in classes])
        return cls(classes, cents)

    @classmethod
    def fit_slices(cls, slices: Iterable) -> "CentroidClassifier":
        slices = [s for s in slices if s.labels is not None]
        if not slices:
            raise ValueError("no labelled slices to fit the classifier on")
        return cls.fit(np.concatenate([s.expr for s in slices]),
                       np.concatenate([s.labels for s in slices]))

    def predict(self, X) -> np.ndarray:
        X = _as_cloud(X)
        if X.shape[1] != self.centroids.shape[1]:
            raise ValueError("dimension mismatch with the fitted centroids")
        nearest = np.argmin(pairwise_sqdist(X, self.centroids), axis=1)
        return np.asarray(self.classes, dtype=object)[nearest]


def weighted_w2_report(X_true, labels_true, X_pred, clf: Optional[CentroidClassifier],
                       cap: int = W2_CAP, seed: int = 0) -> dict:
    """Class-frequency-weighted per-class W2.

    Predicted points are typed with ``clf``. A class with no predicted members
    is scored against the whole predicted cloud and flagged as penalized.
    """
    if clf is None:
        raise ValueError("a fitted classifier is required")
    X_true, X_pred = _as_cloud(X_true), _as_cloud(X_pred)
    labels_true = np.asarray(labels_true, dtype=object)
    pred_labels = clf.predict(X_pred)
    N = X_true.shape[0]
    total = 0.0
    per_class = []
    for c in sorted(set(labels_true.tolist()), key=str):
        true_c = X_true[labels_true == c]
        pred_c = X_pred[pred_labels == c]
        weight = true_c.shape[0] / N
        penalized = pred_c.shape[0] == 0
        dist = w2(true_c, X_pred if penalized else pred_c, cap, seed)
        total += weight * dist
        per_class.append({"class": str(c), "weight": weight, "w2": dist,
                          "n_true": int(true_c.shape[0]), "n_pred": int(pred_c.shape[0]),
                          "penalized": penalized})
    return {"value": total, "per_class": per_class}


def weighted_w2(X_true, labels_true, X_pred, clf, cap: int = W2_CAP, seed: int = 0) -> float:
    return weighted_w2_report(X_true, labels_true, X_pred, clf, cap, seed)["value"]


def celltype_kl(labels_true, labels_pred, vocab: Optional[Sequence] = None) -> float:
    """KL(true || predicted) between smoothed label histograms."""
    labels_true = list(labels_true)
    labels_pred = list(labels_pred)
    if not labels_true or not labels_pred:
        raise ValueError("label sets must be nonempty")
    if vocab is None:
        vocab = sorted(set(labels_true) | set(labels_pred), key=str)
    vocab = list(vocab)
    missing = (set(labels_true) | set(labels_pred)) - set(vocab)
    if missing:
        raise ValueError(f"labels outside the vocabulary: {sorted(missing, key=str)}")
    pos = {c: i for i, c in enumerate(vocab)}
    p = np.full(len(vocab), KL_PSEUDOCOUNT)
    q = np.full(len(vocab), KL_PSEUDOCOUNT)
    np.add.at(p, [pos[c] for c in labels_true], 1.0)
    np.add.at(q, [pos[c] for c in labels_pred], 1.0)
    p /= p.sum()
    q /= q.sum()
    return float(np.sum(p * np.log(p / q)))


@dataclass(frozen=True)
class TransitionRuleSet:
    forbidden: frozenset

    @classmethod
    def from_pairs(cls, pairs) -> "TransitionRuleSet":
        return cls(frozenset((str(a), str(b)) for a, b in pairs))

    def __contains__(self, pair) -> bool:
        return (str(pair[0]), str(pair[1])) in self.forbidden


def count_implausible(coupling, labels_a, labels_b, rules: TransitionRuleSet,
                      samples: int, rng: np.random.Generator) -> int:
    plan = coupling.plan if isinstance(coupling, transport.Coupling) else np.asarray(coupling)
    labels_a = np.asarray(labels_a, dtype=object)
    labels_b = np.asarray(labels_b, dtype=object)
    if plan.shape != (labels_a.shape[0], labels_b.shape[0]):
        raise ValueError(f"labels ({labels_a.shape[0]}, {labels_b.shape[0]}) do not match plan {plan.shape}")
    pairs = transport.sample_pairs(plan, samples, rng)
    if not rules.forbidden:
        return 0
    return int(sum((labels_a[k], labels_b[l]) in rules for k, l in pairs))


METRIC_NAMES = ("w2", "weighted_w2", "mmd", "energy", "kl")


def metric_report(X_pred, X_true, metrics: Sequence[str] = METRIC_NAMES,
                  labels_true=None, clf: Optional[CentroidClassifier] = None,
                  seed: int = 0) -> dict:
    """Evaluate the requested metrics; the result is JSON-serializable."""
    out = {}
    for name in metrics:
        if name not in METRIC_NAMES:
            raise ValueError(f"unknown metric {name!r}; choose from {METRIC_NAMES}")
        if name == "w2":
            out["w2"] = w2_report(X_pred, X_true, seed=seed)
        elif name == "weighted_w2":
            out["weighted_w2"] = weighted_w2_report(X_true, labels_true, X_pred, clf, seed=seed)
        elif name == "mmd":
            out["mmd"] = {"value": mmd_rbf_multi(X_pred, X_true), "quantity": "squared MMD",
                          "gammas": list(MMD_GAMMAS)}
        elif name == "energy":
            out["energy"] = {"value": energy_distance(X_pred, X_true)}
        elif name == "kl":
            if labels_true is None or clf is None:
                raise ValueError("the cell-type KL needs true labels and a classifier")
            pred = clf.predict(X_pred)
            vocab = sorted(set(clf.classes) | set(np.asarray(labels_true).tolist()), key=str)
            out["kl"] = {"value": celltype_kl(labels_true, pred, vocab)}
    return out
