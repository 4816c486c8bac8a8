"""Measurements: kNN, AMI, discrete and nearest-neighbor MI, prototypical
classification, linear probe, and cluster-size statistics.

All information quantities are in nats.
"""
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.special import digamma

from ._kernels import centroid_sums, expected_mutual_info, ross_counts
from .metrics_log import format_record


class Partition(NamedTuple):
    labels: np.ndarray
    groups: int

    @classmethod
    def from_labels(cls, labels):
        """Relabel arbitrary hashable labels to ``0..groups-1`` (sorted order)."""
        uniq, inv = np.unique(np.asarray(labels), return_inverse=True)
        return cls(inv.astype(np.int64).ravel(), int(uniq.size))


def _labels(p):
    return p.labels if isinstance(p, Partition) else np.asarray(p)


@dataclass
class EvalReport:
    metric: str
    value: float
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        self.value = float(self.value)
        if not np.isfinite(self.value):
            raise ValueError(f"{self.metric}: non-finite value")

    def format(self):
        return format_record({"metric": self.metric, "value": self.value, **self.config})


def knn_scores(query, bank_features, bank_labels, k, tau, n_classes=None):
    """Per-class kNN scores: sum of ``exp(v . v'_i / tau)`` over the top-k neighbors.

    ``query`` may be one embedding or a batch; returns (n_classes,) or
    (B, n_classes).
    """
    bank_features = np.asarray(bank_features, dtype=np.float64)
    bank_labels = np.asarray(bank_labels, dtype=np.int64)
    if bank_features.shape[0] == 0:
        raise ValueError("empty kNN bank")
    if not 1 <= k <= bank_features.shape[0]:
        raise ValueError(f"k must be in [1, {bank_features.shape[0]}], got {k}")
    if n_classes is None:
        n_classes = int(bank_labels.max()) + 1
    q = np.asarray(query, dtype=np.float64)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    sims = q @ bank_features.T
    top = np.argpartition(-sims, k - 1, axis=1)[:, :k]
    top_sims = np.take_along_axis(sims, top, axis=1)
    # weights relative to the best neighbor; a common factor leaves the argmax unchanged
    weights = np.exp((top_sims - top_sims.max(axis=1, keepdims=True)) / tau)
    scores = np.zeros((q.shape[0], n_classes))
    rows = np.repeat(np.arange(q.shape[0]), k)
    np.add.at(scores, (rows, bank_labels[top].ravel()), weights.ravel())
    with np.errstate(over="ignore"):
        scale = np.exp(top_sims.max(axis=1, keepdims=True) / tau)
    if np.all(np.isfinite(scale)):
        scores = scores * scale
    return scores[0] if single else scores


def knn_classify(query, bank_features, bank_labels, k=20, tau=0.1, n_classes=None):
    """Predicted class(es); ties go to the lowest class index."""
    scores = knn_scores(query, bank_features, bank_labels, k, tau, n_classes)
    return np.argmax(scores, axis=-1)


def knn_accuracy(query, query_labels, bank_features, bank_labels, k=20, tau=0.1):
    n_classes = int(max(np.max(bank_labels), np.max(query_labels))) + 1
    pred = knn_classify(query, bank_features, bank_labels, k, tau, n_classes)
    return float(np.mean(pred == np.asarray(query_labels)))


def contingency(a, b):
    pa, pb = Partition.from_labels(_labels(a)), Partition.from_labels(_labels(b))
    if pa.labels.shape != pb.labels.shape:
        raise ValueError("partitions cover different numbers of samples")
    table = np.zeros((pa.groups, pb.groups), dtype=np.int64)
    np.add.at(table, (pa.labels, pb.labels), 1)
    return table


def _entropy(counts):
    counts = counts[counts > 0].astype(np.float64)
    p = counts / counts.sum()
    return float(-np.sum(p * np.log(p)))


def _mi_from_table(table):
    n = table.sum()
    nz = table > 0
    pij = table[nz] / n
    outer = np.outer(table.sum(axis=1), table.sum(axis=0))[nz] / float(n) ** 2
    return float(np.sum(pij * (np.log(pij) - np.log(outer))))


def mi_discrete(a, b):
    """Plug-in mutual information of two partitions."""
    return _mi_from_table(contingency(a, b))


def ami(a, b):
    """Adjusted mutual information, arithmetic-mean normalization.

    ``(MI - E[MI]) / (mean(H(a), H(b)) - E[MI])`` with the expectation under
    the hypergeometric (fixed-marginals) model; 0 when the denominator is
    below 1e-12.
    """
    table = contingency(a, b)
    n = int(table.sum())
    a_sums = table.sum(axis=1).astype(np.int64)
    b_sums = table.sum(axis=0).astype(np.int64)
    mi = _mi_from_table(table)
    emi = expected_mutual_info(a_sums, b_sums, n)
    denom = 0.5 * (_entropy(a_sums) + _entropy(b_sums)) - emi
    if abs(denom) < 1e-12:
        return 0.0
    return float((mi - emi) / denom)


def mi_ross_raw(features, labels, k=3):
    """Nearest-neighbor MI between continuous features and discrete labels.

    For each sample, ``d`` is the distance to its k-th nearest same-label
    neighbor and ``m`` the number of samples (any label, excluding itself)
    within ``d``; the estimate is
    ``psi(n) - <psi(n_label)> + psi(k) - <psi(m)>``.  Not clamped.
    """
    x = np.ascontiguousarray(features, dtype=np.float64)
    part = Partition.from_labels(_labels(labels))
    if x.shape[0] != part.labels.shape[0]:
        raise ValueError("features and labels differ in length")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    sizes = np.bincount(part.labels, minlength=part.groups)
    if sizes.min() <= k:
        raise ValueError(f"every class needs more than k={k} members (smallest has {sizes.min()})")
    m = ross_counts(x, part.labels, int(k))
    n = x.shape[0]
    return float(digamma(n) - np.mean(digamma(sizes[part.labels])) + digamma(k) - np.mean(digamma(m)))


def mi_ross(features, labels, k=3):
    """:func:`mi_ross_raw` clamped at 0."""
    return max(0.0, mi_ross_raw(features, labels, k))


def class_means(support_features, support_labels):
    feats = np.ascontiguousarray(support_features, dtype=np.float64)
    labels = np.asarray(_labels(support_labels), dtype=np.int64)
    n_classes = int(labels.max()) + 1
    sums, counts = centroid_sums(feats, labels, n_classes)
    if np.any(counts == 0):
        missing = int(np.flatnonzero(counts == 0)[0])
        raise ValueError(f"class {missing} has no support samples")
    norms = np.linalg.norm(sums, axis=1, keepdims=True)
    return sums / np.where(norms > 0, norms, 1.0)


def prototypical_classify(support_features, support_labels, query):
    """Nearest normalized class mean by dot product; ties to the lowest class."""
    means = class_means(support_features, support_labels)
    return np.argmax(np.asarray(query, dtype=np.float64) @ means.T, axis=-1)


def linear_probe(train_features, train_labels, test_features, test_labels,
                 iters=500, lr=0.5, seed=0):
    """Softmax regression by full-batch gradient descent; returns test accuracy."""
    Xtr = np.asarray(train_features, dtype=np.float64)
    Xte = np.asarray(test_features, dtype=np.float64)
    ytr = np.asarray(train_labels, dtype=np.int64)
    yte = np.asarray(test_labels, dtype=np.int64)
    if Xtr.ndim != 2 or Xte.ndim != 2 or Xtr.shape[1] != Xte.shape[1]:
        raise ValueError("train/test feature matrices must be 2-D with equal widths")
    if Xtr.shape[0] != ytr.shape[0] or Xte.shape[0] != yte.shape[0]:
        raise ValueError("feature and label counts differ")
    n_classes = int(max(ytr.max(), yte.max())) + 1
    rng = np.random.default_rng(seed)
    W = 0.01 * rng.standard_normal((Xtr.shape[1], n_classes))
    b = np.zeros(n_classes)
    onehot = np.eye(n_classes)[ytr]
    for _ in range(iters):
        logits = Xtr @ W + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - onehot) / Xtr.shape[0]
        W -= lr * (Xtr.T @ g)
        b -= lr * g.sum(axis=0)
    pred = np.argmax(Xte @ W + b, axis=1)
    return float(np.mean(pred == yte))


def cluster_size_stats(member_count, bins=10):
    """Mean, population std and a ``bins``-bin histogram ``[(lo, hi, count), ...]``.

    Accepts a PrototypeSet/Clustering (anything with ``member_count``) or raw counts.
    """
    z = np.asarray(getattr(member_count, "member_count", member_count), dtype=np.float64)
    counts, edges = np.histogram(z, bins=bins)
    hist = [(float(lo), float(hi), int(c)) for lo, hi, c in zip(edges[:-1], edges[1:], counts)]
    return float(z.mean()), float(z.std()), hist


def format_histogram(hist):
    return "".join(f"{lo!r},{hi!r},{c}\n" for lo, hi, c in hist)
