"""Spherical k-means on unit-norm features.

Seeding is k-means++ on squared chordal distance, but the random draw for
each point is derived from a hash of the point's own coordinates rather than
its row position.  Permuting the rows therefore permutes the assignment and
leaves the centroids unchanged.
"""
from dataclasses import dataclass, field
import hashlib
import struct

import numpy as np

from ._kernels import centroid_sums
from .errors import NumericError
from .serialization import atomic_write_text, write_tensor_file

UNIT_TOL = 1e-6
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


@dataclass
class Clustering:
    k: int
    centroids: np.ndarray
    assignment: np.ndarray
    member_count: np.ndarray
    cost_history: list = field(default_factory=list)
    n_iter: int = 0

    @property
    def cost(self):
        return self.cost_history[-1] if self.cost_history else float("nan")


def _point_keys(x, seed):
    key = struct.pack("<q", int(seed) & 0x7FFFFFFFFFFFFFFF)
    out = np.empty(x.shape[0], dtype=np.uint64)
    for i, row in enumerate(x):
        digest = hashlib.blake2b(row.tobytes(), digest_size=8, key=key).digest()
        out[i] = int.from_bytes(digest, "little")
    return out


def _splitmix_uniform(keys, stream):
    z = keys + np.uint64(stream + 1) * _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    z = z ^ (z >> np.uint64(31))
    return ((z >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53


def kmeans_pp_seed(x, k, seed):
    """Pick ``k`` seed rows by k-means++ (weights = squared chordal distance)."""
    n = x.shape[0]
    keys = _point_keys(x, seed)
    chosen = []
    closest = np.full(n, np.inf)
    taken = np.zeros(n, dtype=bool)
    with np.errstate(over="ignore"):
        for t in range(k):
            u = _splitmix_uniform(keys, t)
            if t == 0:
                weights = np.ones(n)
            else:
                weights = np.maximum(closest, 0.0)
            # exponential race: argmin of Exp(1)/w samples index i with probability w_i / sum(w)
            race = np.full(n, np.inf)
            pos = weights > 0
            race[pos] = -np.log(u[pos]) / weights[pos]
            if not np.isfinite(race).any():
                race = np.where(taken, np.inf, -np.log(u))
            idx = int(np.argmin(race))
            chosen.append(idx)
            taken[idx] = True
            d2 = 2.0 - 2.0 * (x @ x[idx])
            closest = np.minimum(closest, d2)
    return x[chosen].copy()


def _assign(x, centroids):
    sims = x @ centroids.T
    labels = np.argmax(sims, axis=1).astype(np.int64)
    best = sims[np.arange(x.shape[0]), labels]
    return labels, best


def _repair_empty(x, labels, best, centroids):
    """Give every empty cluster the worst-fit point of the current largest cluster."""
    k = centroids.shape[0]
    while True:
        counts = np.bincount(labels, minlength=k)
        empty = np.flatnonzero(counts == 0)
        if empty.size == 0:
            return
        j = int(empty[0])
        donor = int(np.argmax(counts))
        members = np.flatnonzero(labels == donor)
        p = int(members[np.argmin(best[members])])
        labels[p] = j
        centroids[j] = x[p]
        best[p] = float(x[p] @ x[p])


def _normalized_means(x, labels, k, previous):
    sums, counts = centroid_sums(x, labels, k)
    norms = np.linalg.norm(sums, axis=1)
    out = previous.copy()
    ok = norms > 1e-12
    # a cluster whose members cancel out keeps its old centroid (every unit vector is optimal)
    out[ok] = sums[ok] / norms[ok, None]
    return out, counts


def _check_features(x):
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"features must be a 2-D matrix, got shape {x.shape}")
    norms = np.linalg.norm(x, axis=1)
    if x.shape[0] and np.max(np.abs(norms - 1.0)) > UNIT_TOL:
        raise ValueError("features must be unit-norm rows")
    return x


def kmeans(features, k, max_iters=100, tol=1e-6, seed=0):
    """Spherical k-means (cosine similarity) with k-means++ seeding.

    Parameters
    ----------
    features : ndarray, shape (n, d)
        Unit-norm rows.
    k : int
        Number of clusters, ``1 <= k <= n``.
    max_iters : int
        Upper bound on Lloyd iterations.
    tol : float
        Stop once no centroid moves more than this (Euclidean).
    seed : int
        Seeds the k-means++ draws.

    Returns
    -------
    Clustering
        Unit-norm centroids (normalized member means), hard assignment,
        member counts, and the within-cluster cost ``sum(1 - v . c)``
        after every assignment step.
    """
    x = _check_features(features)
    n = x.shape[0]
    k = int(k)
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k > n:
        raise ValueError(f"k={k} exceeds the number of points n={n}")

    centroids = kmeans_pp_seed(x, k, seed)
    costs = []
    n_iter = 0
    for n_iter in range(1, max_iters + 1):
        labels, best = _assign(x, centroids)
        cost = float(np.sum(1.0 - best))
        if costs and cost > costs[-1] + 1e-9 * max(n, 1):
            raise NumericError(f"k-means cost increased from {costs[-1]!r} to {cost!r}")
        costs.append(cost)
        _repair_empty(x, labels, best, centroids)
        new_centroids, _ = _normalized_means(x, labels, k, centroids)
        shift = float(np.max(np.linalg.norm(new_centroids - centroids, axis=1)))
        centroids = new_centroids
        if shift < tol:
            break

    labels, best = _assign(x, centroids)
    _repair_empty(x, labels, best, centroids)
    centroids, counts = _normalized_means(x, labels, k, centroids)
    costs.append(float(np.sum(1.0 - np.einsum("ij,ij->i", x, centroids[labels]))))
    return Clustering(k, centroids, labels, counts, costs, n_iter)


def multi_cluster(features, K, max_iters=100, tol=1e-6, seed=0):
    """One independent :func:`kmeans` run per entry of ``K`` (run ``m`` uses seed ``seed + m``)."""
    K = list(K)
    if not K:
        raise ValueError("K must be non-empty")
    return [kmeans(features, k, max_iters, tol, seed + m) for m, k in enumerate(K)]


def format_assignment(assignment):
    return "".join(f"{i},{int(c)}\n" for i, c in enumerate(assignment))


def dump_clustering(prefix, clustering):
    """Write ``<prefix>.txt`` (``index,cluster`` lines) and ``<prefix>.pclt`` (centroids)."""
    atomic_write_text(f"{prefix}.txt", format_assignment(clustering.assignment))
    write_tensor_file(f"{prefix}.pclt", clustering.centroids)
