"""Prototype sets: k-means centroids plus a per-prototype concentration.

The concentration of a cluster with members ``v'_1..v'_Z`` around centroid
``c`` is ``sum_z |v'_z - c| / (Z ln(Z + alpha))``: small for tight or large
clusters.  Within one granularity the values are rescaled to mean ``tau`` and
kept inside ``[tau/10, 10 tau]``.
"""
from dataclasses import dataclass
import struct

import numpy as np

from .serialization import Reader, atomic_write_bytes, pack_f64, pack_i64

PHI_EPS = 1e-12
PHI_CLAMP = 10.0
PROTO_MAGIC = b"PCLP1"


@dataclass
class PrototypeSet:
    centroids: np.ndarray
    phi: np.ndarray
    member_count: np.ndarray
    assignment: np.ndarray
    granularity: int = 0

    @property
    def k(self):
        return self.centroids.shape[0]


def estimate_concentration(centroid, members, alpha=10.0):
    members = np.atleast_2d(np.asarray(members, dtype=np.float64))
    Z = members.shape[0]
    if Z == 0:
        raise ValueError("cannot estimate concentration of an empty cluster")
    if not alpha > 0:
        raise ValueError(f"alpha must be > 0, got {alpha}")
    dist = np.linalg.norm(members - np.asarray(centroid, dtype=np.float64), axis=1)
    return float(dist.sum() / (Z * np.log(Z + alpha)))


def _clipped_mean_scale(phi, target, lo, hi):
    """Scale ``s`` with ``mean(clip(s * phi, lo, hi)) == target``, or None if unreachable."""
    n = phi.size
    pos = phi > 0
    if (n - pos.sum()) * lo + pos.sum() * hi < n * target:
        return None
    # overflow to inf is harmless below: inf breakpoints are dropped and inf products clip to hi
    with np.errstate(over="ignore"):
        return _solve_clipped_scale(phi, pos, n * target, lo, hi)


def _solve_clipped_scale(phi, pos, goal, lo, hi):
    breaks = np.unique(np.concatenate([lo / phi[pos], hi / phi[pos]]))
    breaks = breaks[np.isfinite(breaks)]

    # f(s) = sum clip(s phi, lo, hi) is piecewise linear and nondecreasing in s
    def f(s):
        return np.clip(s * phi, lo, hi).sum()

    vals = np.array([f(b) for b in breaks])
    j = int(np.searchsorted(vals, goal))
    if j < breaks.size and vals[j] == goal:
        return float(breaks[j])
    # within (breaks[j-1], breaks[j]) the free set is fixed, so solve the linear piece
    s_probe = breaks[j - 1] * 1.0000001 if j == breaks.size else 0.5 * (breaks[j - 1] + breaks[j])
    scaled = s_probe * phi
    free = pos & (scaled > lo) & (scaled < hi)
    fixed_sum = np.where(scaled <= lo, lo, 0.0).sum() + np.where(scaled >= hi, hi, 0.0).sum()
    return float((goal - fixed_sum) / phi[free].sum())


def normalize_concentrations(phi_raw, tau, clamp=PHI_CLAMP):
    """Rescale to mean ``tau`` and clamp to ``[tau/clamp, tau*clamp]``.

    When clamping moves any value, the scale is re-solved so the clamped
    values still average to ``tau``.
    """
    phi = np.asarray(phi_raw, dtype=np.float64).ravel()
    if phi.size == 0:
        raise ValueError("need at least one concentration value")
    if not tau > 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    mean = phi.mean()
    if mean < PHI_EPS:
        return np.full(phi.size, float(tau))
    lo, hi = tau / clamp, tau * clamp
    out = phi * (tau / mean)
    if out.min() >= lo and out.max() <= hi:
        return out
    s = _clipped_mean_scale(phi, tau, lo, hi)
    if s is None:
        return np.where(phi > 0, hi, lo)
    return np.clip(s * phi, lo, hi)


def build_prototype_set(clustering, momentum_features, alpha=10.0, tau=0.1, granularity=0, fixed_phi=False):
    """Attach concentrations to a clustering of ``momentum_features``.

    ``fixed_phi=True`` sets every concentration to ``tau`` (the ablation used
    to compare cluster balance against estimated concentrations).
    """
    feats = np.asarray(momentum_features, dtype=np.float64)
    assignment = np.asarray(clustering.assignment, dtype=np.int64)
    if assignment.shape[0] != feats.shape[0]:
        raise ValueError("clustering does not cover all features")
    k = clustering.centroids.shape[0]
    if fixed_phi:
        phi = np.full(k, float(tau))
    else:
        raw = np.empty(k)
        for j in range(k):
            raw[j] = estimate_concentration(clustering.centroids[j], feats[assignment == j], alpha)
        phi = normalize_concentrations(raw, tau)
    counts = np.bincount(assignment, minlength=k).astype(np.int64)
    return PrototypeSet(clustering.centroids.copy(), phi, counts, assignment.copy(), granularity)


def prototype_bytes(psets):
    parts = [PROTO_MAGIC, struct.pack("<I", len(psets))]
    for ps in psets:
        k, d = ps.centroids.shape
        n = ps.assignment.shape[0]
        parts.append(struct.pack("<QQQQ", ps.granularity, k, d, n))
        parts += [pack_f64(ps.centroids), pack_f64(ps.phi), pack_i64(ps.member_count), pack_i64(ps.assignment)]
    return b"".join(parts)


def save_prototypes(path, psets):
    atomic_write_bytes(path, prototype_bytes(psets))


def load_prototypes(path):
    with open(path, "rb") as fh:
        rd = Reader(fh.read(), "prototype file")
    if rd.take(5) != PROTO_MAGIC:
        raise ValueError(f"{path}: bad prototype magic")
    (count,) = rd.unpack("<I")
    out = []
    for _ in range(count):
        g, k, d, n = rd.unpack("<QQQQ")
        out.append(PrototypeSet(rd.f64((k, d)), rd.f64((k,)), rd.i64((k,)), rd.i64((n,)), int(g)))
    return out
