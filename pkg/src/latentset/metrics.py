"""Evaluation metrics with deliberately simple, brute-force-verifiable forms.

Every scorer here is a pure function over numpy arrays. Conventions that
matter for reproducibility are fixed: 15 equal-width calibration bins,
half-credit for AUROC ties, average-precision step integration for AUPRC,
median-heuristic RBF bandwidth for MMD, and average ranks for Spearman ties.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ShapeError

PROB_CLIP = 1e-12


@dataclass
class MetricsReport:
    """Named scalar metrics plus run metadata; None marks an undefined metric."""

    metrics: dict[str, Optional[float]]
    meta: dict[str, object] = field(default_factory=dict)

    def to_json(self) -> str:
        doc = {"metrics": self.metrics, "meta": self.meta}
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"

    def csv_row(self, columns: list[str]) -> str:
        cells = []
        for c in columns:
            v = self.metrics.get(c, self.meta.get(c))
            if v is None:
                cells.append("")
            elif isinstance(v, float):
                cells.append(repr(v))
            else:
                cells.append(str(v))
        return ",".join(cells)


def _as_1d(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ShapeError(f"{name} must be rank 1, got shape {arr.shape}")
    return arr


def ece(labels, probs, bins: int = 15) -> float:
    """Expected calibration error with equal-width confidence bins.

    `probs` is either a vector of P(y=1) for binary labels or an (N, C) matrix
    of class probabilities; confidence is the top-class probability and
    accuracy is agreement of the top class with the label. Empty bins
    contribute nothing.
    """
    labels = np.asarray(labels)
    probs_arr = np.asarray(probs, dtype=np.float64)
    if labels.size == 0:
        raise ShapeError("ece needs a non-empty evaluation set")
    if bins < 1:
        raise ShapeError("ece needs at least one bin")
    if probs_arr.ndim == 1:
        conf = np.maximum(probs_arr, 1.0 - probs_arr)
        pred = (probs_arr >= 0.5).astype(np.int64)
    elif probs_arr.ndim == 2:
        conf = np.max(probs_arr, axis=1)
        pred = np.argmax(probs_arr, axis=1)
    else:
        raise ShapeError(f"probs must be rank 1 or 2, got shape {probs_arr.shape}")
    if conf.shape[0] != labels.shape[0]:
        raise ShapeError("labels and probs length mismatch")
    correct = (pred == labels.astype(np.int64)).astype(np.float64)
    # bin b covers [b/bins, (b+1)/bins); confidence 1.0 lands in the last bin
    idx = np.minimum((conf * bins).astype(np.int64), bins - 1)
    total = 0.0
    n = labels.shape[0]
    for b in range(bins):
        sel = idx == b
        nb = int(np.sum(sel))
        if nb == 0:
            continue
        acc_b = float(np.sum(correct[sel])) / nb
        conf_b = float(np.sum(conf[sel])) / nb
        total += (nb / n) * abs(acc_b - conf_b)
    return float(total)


def auroc(labels, scores) -> float:
    """Area under the ROC curve via the rank (Mann-Whitney) form, ties at half credit."""
    labels = _as_1d(labels, "labels").astype(np.int64)
    scores = _as_1d(scores, "scores")
    if labels.shape != scores.shape:
        raise ShapeError("labels and scores length mismatch")
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise ShapeError("auroc needs both classes present")
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores), dtype=np.float64)
    ranks[order] = np.arange(1, len(scores) + 1, dtype=np.float64)
    # average ranks within tied groups gives exact half-credit pair counting
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        if j > i:
            avg = 0.5 * (i + 1 + j + 1)
            ranks[order[i : j + 1]] = avg
        i = j + 1
    rank_sum = float(np.sum(ranks[labels == 1]))
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def auprc(labels, scores) -> float:
    """Average precision: sum of precision-weighted recall increments over
    descending score thresholds, with tied scores processed as one block."""
    labels = _as_1d(labels, "labels").astype(np.int64)
    scores = _as_1d(scores, "scores")
    if labels.shape != scores.shape:
        raise ShapeError("labels and scores length mismatch")
    n_pos = int(np.sum(labels == 1))
    if n_pos == 0:
        raise ShapeError("auprc needs at least one positive label")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    ap = 0.0
    tp = 0
    fp = 0
    prev_recall = 0.0
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and s[j + 1] == s[i]:
            j += 1
        tp += int(np.sum(y[i : j + 1] == 1))
        fp += (j - i + 1) - int(np.sum(y[i : j + 1] == 1))
        precision = tp / (tp + fp)
        recall = tp / n_pos
        ap += (recall - prev_recall) * precision
        prev_recall = recall
        i = j + 1
    return float(ap)


def nll(labels, probs) -> float:
    """Mean negative log-likelihood of binary labels under P(y=1) probabilities."""
    labels = _as_1d(labels, "labels")
    probs = _as_1d(probs, "probs")
    if labels.shape != probs.shape:
        raise ShapeError("labels and probs length mismatch")
    p = np.clip(probs, PROB_CLIP, 1.0 - PROB_CLIP)
    ll = labels * np.log(p) + (1.0 - labels) * np.log(1.0 - p)
    return float(-np.mean(ll))


def mse(targets, means) -> float:
    targets = _as_1d(targets, "targets")
    means = _as_1d(means, "means")
    if targets.shape != means.shape:
        raise ShapeError("targets and means length mismatch")
    return float(np.mean((targets - means) ** 2))


@dataclass(frozen=True)
class MmdEstimate:
    """Squared-MMD estimate; `biased` flags the fallback used for singleton sets."""

    value: float
    biased: bool
    bandwidth: float

    def __float__(self) -> float:
        return self.value


def mmd(set_a, set_b) -> MmdEstimate:
    """Squared maximum mean discrepancy with an RBF kernel.

    Bandwidth is the median pairwise Euclidean distance over the pooled set
    (median heuristic); the kernel is exp(-dist^2 / (2 h^2)). The unbiased
    estimator is used whenever both sets have at least two points and may be
    slightly negative; singleton sets fall back to the biased form.
    """
    a = np.atleast_2d(np.asarray(set_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(set_b, dtype=np.float64))
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ShapeError("mmd needs non-empty sets")
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"mmd sets have different dims: {a.shape[1]} vs {b.shape[1]}")
    pooled = np.concatenate([a, b], axis=0)
    sq = np.sum(pooled**2, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * pooled @ pooled.T
    np.maximum(d2, 0.0, out=d2)
    tri = np.sqrt(d2[np.triu_indices(len(pooled), k=1)])
    h = float(np.median(tri))
    if h <= 0.0:
        h = 1.0  # all points coincide; any bandwidth gives MMD^2 = 0
    denom = 2.0 * h * h
    n, m = a.shape[0], b.shape[0]
    k = np.exp(-d2 / denom)
    kxx = k[:n, :n]
    kyy = k[n:, n:]
    kxy = k[:n, n:]
    biased = n < 2 or m < 2
    if biased:
        value = float(np.mean(kxx) + np.mean(kyy) - 2.0 * np.mean(kxy))
    else:
        sxx = (np.sum(kxx) - np.trace(kxx)) / (n * (n - 1))
        syy = (np.sum(kyy) - np.trace(kyy)) / (m * (m - 1))
        value = float(sxx + syy - 2.0 * np.mean(kxy))
    return MmdEstimate(value=value, biased=biased, bandwidth=h)


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x), dtype=np.float64)
    i = 0
    xs = x[order]
    while i < len(x):
        j = i
        while j + 1 < len(x) and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + 1 + j + 1)
        i = j + 1
    return ranks


def spearman(x, y) -> Optional[float]:
    """Spearman rank correlation with average ranks for ties.

    Returns None when either input is constant (correlation undefined).
    """
    x = _as_1d(x, "x")
    y = _as_1d(y, "y")
    if x.shape != y.shape:
        raise ShapeError("spearman inputs length mismatch")
    rx = _average_ranks(x)
    ry = _average_ranks(y)
    sx = rx - np.mean(rx)
    sy = ry - np.mean(ry)
    denom = float(np.sqrt(np.sum(sx**2) * np.sum(sy**2)))
    if denom == 0.0:
        return None
    return float(np.sum(sx * sy) / denom)
