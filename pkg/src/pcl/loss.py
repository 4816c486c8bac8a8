"""InfoNCE and ProtoNCE with exact gradients w.r.t. the query embeddings.

Every term has the same shape: for query ``v_i`` a list of keys ``k_i0..k_ir``
(positive first) and per-key scales ``s_ij``; the term is the cross-entropy
``-log softmax_j(v_i . k_ij / s_ij)[0]``.  Instance terms use ``s = tau``,
prototype terms use the prototype's concentration.  Losses are averaged over
the batch.
"""
from dataclasses import dataclass, field

import numpy as np


@dataclass
class LossValue:
    loss: float
    grad: np.ndarray
    instance: float = 0.0
    proto: list = field(default_factory=list)

    @property
    def proto_total(self):
        return float(np.mean(self.proto)) if self.proto else 0.0


@dataclass
class NegativeBank:
    """Momentum features of the whole training set; row ``i`` is sample ``i``."""

    features: np.ndarray

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)

    def __len__(self):
        return self.features.shape[0]


def contrast(v, keys, scales):
    """Mean positive-first cross-entropy and its gradient w.r.t. ``v``.

    ``v`` is (B, d), ``keys`` is (B, m, d) with the positive at index 0,
    ``scales`` broadcasts against (B, m).
    """
    B = v.shape[0]
    scales = np.broadcast_to(np.asarray(scales, dtype=np.float64), keys.shape[:2])
    logits = np.einsum("bd,bmd->bm", v, keys) / scales
    shift = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - shift)
    denom = e.sum(axis=1)
    per_sample = np.log(denom) + shift[:, 0] - logits[:, 0]
    p = e / denom[:, None]
    p[:, 0] -= 1.0
    grad = np.einsum("bm,bmd->bd", p / scales, keys) / B
    return float(per_sample.mean()), grad


def _sample_excluding(rng, n, own, r):
    """For each entry of ``own``, ``min(r, n-1)`` distinct indices from ``range(n)`` minus it."""
    own = np.asarray(own, dtype=np.int64)
    r_eff = max(0, min(int(r), n - 1))
    if r_eff == 0:
        return np.empty((own.size, 0), dtype=np.int64)
    if r_eff == n - 1:
        idx = np.broadcast_to(np.arange(n - 1), (own.size, n - 1)).copy()
    else:
        draws = rng.random((own.size, n - 1))
        idx = np.argpartition(draws, r_eff - 1, axis=1)[:, :r_eff]
    return idx + (idx >= own[:, None])


def sample_negative_prototypes(pset, own_cluster, r, rng):
    """Uniformly pick ``min(r, k-1)`` prototype indices other than ``own_cluster``."""
    if r < 0:
        raise ValueError(f"r must be >= 0, got {r}")
    return _sample_excluding(rng, pset.k, [own_cluster], r)[0]


def _as_batch(v):
    v = np.asarray(v, dtype=np.float64)
    return v[None, :] if v.ndim == 1 else v


def info_nce(v, v_pos, negatives, tau):
    """Instance contrast against one positive and ``r`` negatives per query.

    ``negatives`` is (B, r, d), or (r, d) shared by every query.
    """
    if not tau > 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    v, v_pos = _as_batch(v), _as_batch(v_pos)
    negatives = np.asarray(negatives, dtype=np.float64)
    if negatives.ndim == 2:
        negatives = np.broadcast_to(negatives, (v.shape[0], *negatives.shape))
    keys = np.concatenate([v_pos[:, None, :], negatives], axis=1)
    loss, grad = contrast(v, keys, tau)
    return LossValue(loss, grad, instance=loss)


def proto_term(v, indices, pset, r, rng):
    """Prototype contrast for queries whose dataset indices are ``indices``.

    Positive key is the query's assigned centroid, negatives are ``r``
    sampled other centroids; every similarity is divided by that
    prototype's own concentration.
    """
    v = _as_batch(v)
    indices = np.atleast_1d(np.asarray(indices, dtype=np.int64))
    if indices.shape[0] != v.shape[0]:
        raise ValueError("need one dataset index per query")
    n = pset.assignment.shape[0]
    if indices.size and (indices.min() < 0 or indices.max() >= n):
        raise ValueError("query index has no assignment in this prototype set")
    own = pset.assignment[indices]
    neg = _sample_excluding(rng, pset.k, own, r)
    which = np.concatenate([own[:, None], neg], axis=1)
    loss, grad = contrast(v, pset.centroids[which], pset.phi[which])
    return LossValue(loss, grad, proto=[loss])


def proto_nce(v, v_pos, indices, bank, psets, cfg, rng, use_instance=True):
    """Instance InfoNCE term plus the mean prototype term over granularities.

    ``cfg`` supplies ``tau`` and ``r``.  Instance negatives are ``min(r, n-1)``
    bank rows other than the query's own index.  Draw order (instance
    negatives, then each granularity) is fixed so a seeded ``rng`` replays
    the same sample.
    """
    v, v_pos = _as_batch(v), _as_batch(v_pos)
    indices = np.atleast_1d(np.asarray(indices, dtype=np.int64))
    if not use_instance and not psets:
        raise ValueError("loss has no terms: instance term disabled and no prototype sets")
    total = 0.0
    grad = np.zeros_like(v)
    inst = 0.0
    if use_instance:
        neg_idx = _sample_excluding(rng, len(bank), indices, cfg.r)
        lv = info_nce(v, v_pos, bank.features[neg_idx], cfg.tau)
        inst = lv.loss
        total += lv.loss
        grad += lv.grad
    protos = []
    M = len(psets)
    for pset in psets:
        lv = proto_term(v, indices, pset, cfg.r, rng)
        protos.append(lv.loss)
        total += lv.loss / M
        grad += lv.grad / M
    return LossValue(total, grad, instance=inst, proto=protos)
