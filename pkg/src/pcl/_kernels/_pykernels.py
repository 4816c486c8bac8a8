"""Pure-NumPy fallbacks for the compiled kernels.

Centroid accumulation follows the same sequential order as ``_ckernels.pyx``,
so centroid sums are bit-identical across backends.
"""
import numpy as np
from scipy.special import gammaln


def centroid_sums(x, labels, k):
    x = np.ascontiguousarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range for k={k}")
    sums = np.zeros((k, x.shape[1]), dtype=np.float64)
    np.add.at(sums, labels, x)
    counts = np.bincount(labels, minlength=k).astype(np.int64)
    return sums, counts


def expected_mutual_info(a_sums, b_sums, n):
    a_sums = np.asarray(a_sums, dtype=np.int64)
    b_sums = np.asarray(b_sums, dtype=np.int64)
    n = int(n)
    log_n = np.log(n)
    lg_n = gammaln(n + 1.0)
    emi = 0.0
    for ai in a_sums:
        for bj in b_sums:
            lo = max(1, ai + bj - n)
            hi = min(ai, bj)
            if hi < lo:
                continue
            nij = np.arange(lo, hi + 1, dtype=np.float64)
            fixed = gammaln(ai + 1.0) + gammaln(bj + 1.0) + gammaln(n - ai + 1.0) + gammaln(n - bj + 1.0) - lg_n
            term = (nij / n) * (log_n + np.log(nij) - np.log(ai) - np.log(bj))
            gln = (fixed - gammaln(nij + 1.0) - gammaln(ai - nij + 1.0)
                   - gammaln(bj - nij + 1.0) - gammaln(n - ai - bj + nij + 1.0))
            emi += float(np.sum(term * np.exp(gln)))
    return emi


def ross_counts(x, labels, k):
    x = np.ascontiguousarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = x.shape[0]
    m = np.empty(n, dtype=np.int64)
    idx = np.arange(n)
    for i in range(n):
        diff = x - x[i]
        dist = np.einsum("ij,ij->i", diff, diff)
        same = (labels == labels[i]) & (idx != i)
        cand = dist[same]
        if cand.size < k:
            raise ValueError("class has too few members for the neighbor count")
        radius = np.partition(cand, k - 1)[k - 1]
        m[i] = int(np.count_nonzero(dist <= radius)) - 1
    return m
