"""The EM training loop.

Each epoch from ``warmup`` on starts with an E-step: encode the un-augmented
training inputs with the momentum encoder, cluster them once per entry of
``K``, and estimate concentrations.  The M-step then runs minibatch SGD on
ProtoNCE with those prototype sets frozen.  Before ``warmup`` only the
instance term is trained.
"""
from dataclasses import dataclass, field
import os
import time

import numpy as np

from ._rng import derive_seed, make_rng
from .clustering import multi_cluster, kmeans
from .data import AugmentConfig, augment
from .encoder import backward, encode, init_params, momentum_update, save_checkpoint, sgd_step
from .errors import ConfigError, NumericError
from .evaluation import cluster_size_stats
from .loss import NegativeBank, proto_nce
from .metrics_log import format_record
from .prototypes import build_prototype_set, save_prototypes
from .serialization import atomic_write_text

LOSS_MODES = ("both", "instance", "proto")


@dataclass(frozen=True)
class TrainConfig:
    tau: float = 0.1
    alpha: float = 10.0
    r: int = 16000
    K: tuple = (25000, 50000, 100000)
    m_ema: float = 0.999
    warmup: int = 20
    epochs: int = 200
    batch_size: int = 256
    lr: float = 0.03
    lr_milestones: tuple = (120, 160)
    lr_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    loss_mode: str = "both"
    fixed_phi: bool = False
    kmeans_iters: int = 100
    kmeans_tol: float = 1e-6
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "K", tuple(int(k) for k in self.K))
        object.__setattr__(self, "lr_milestones", tuple(int(m) for m in self.lr_milestones))
        if not self.tau > 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if not self.alpha > 0:
            raise ConfigError(f"alpha must be > 0, got {self.alpha}")
        if self.r < 0:
            raise ConfigError(f"r must be >= 0, got {self.r}")
        if not 0.0 <= self.m_ema < 1.0:
            raise ConfigError(f"m_ema must be in [0, 1), got {self.m_ema}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.epochs < 0 or self.warmup < 0:
            raise ConfigError("epochs and warmup must be >= 0")
        if self.warmup > self.epochs:
            raise ConfigError(f"warmup ({self.warmup}) exceeds epochs ({self.epochs})")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.loss_mode not in LOSS_MODES:
            raise ConfigError(f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")
        if self.loss_mode != "instance" and not self.K:
            raise ConfigError("K must be non-empty unless loss_mode is 'instance'")
        if any(k < 1 for k in self.K):
            raise ConfigError(f"cluster counts must be >= 1, got {self.K}")

    @property
    def M(self):
        return 0 if self.loss_mode == "instance" else len(self.K)

    def check_dataset(self, n):
        if self.M and max(self.K) > n:
            raise ConfigError(f"cluster count {max(self.K)} exceeds dataset size {n}")


@dataclass
class TrainState:
    params: object
    bank: NegativeBank = None
    psets: list = field(default_factory=list)
    epoch: int = 0
    history: list = field(default_factory=list)
    timings: list = field(default_factory=list)


def lr_at(cfg, epoch):
    """Step schedule: ``lr * lr_factor ** (number of milestones <= epoch)``."""
    passed = sum(1 for m in cfg.lr_milestones if epoch >= m)
    return cfg.lr * cfg.lr_factor**passed


def proto_phase(cfg, epoch):
    return cfg.M > 0 and epoch >= cfg.warmup


def refresh_bank(state, inputs):
    state.bank = NegativeBank(encode(state.params, inputs, use_momentum=True))
    return state


def e_step(state, inputs, cfg):
    """Momentum features -> one clustering per granularity -> prototype sets."""
    refresh_bank(state, inputs)
    feats = state.bank.features
    seed = derive_seed(cfg.seed, "kmeans", state.epoch)
    clusterings = multi_cluster(feats, cfg.K, cfg.kmeans_iters, cfg.kmeans_tol, seed)
    state.psets = [
        build_prototype_set(c, feats, cfg.alpha, cfg.tau, granularity=m, fixed_phi=cfg.fixed_phi)
        for m, c in enumerate(clusterings)
    ]
    return state


def _surrogate_terms(v, pset):
    logits = (v @ pset.centroids.T) / pset.phi
    shift = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - shift)
    denom = e.sum(axis=1, keepdims=True)
    log_p = logits - shift - np.log(denom)
    return log_p, e / denom


def surrogate_lower_bound(params, inputs, pset):
    """``F = sum_i [ln(1/k) + log softmax_j(v_i . c_j / phi_j)[a_i]]`` over all k prototypes.

    Uses the main encoder on ``inputs``; no negative sampling.
    """
    v = encode(params, inputs)
    log_p, _ = _surrogate_terms(v, pset)
    n = v.shape[0]
    return float(np.sum(log_p[np.arange(n), pset.assignment]) - n * np.log(pset.k))


def surrogate_gradient(params, inputs, pset):
    """``F`` and its gradient w.r.t. every main parameter."""
    v = encode(params, inputs)
    log_p, p = _surrogate_terms(v, pset)
    n = v.shape[0]
    rows = np.arange(n)
    value = float(np.sum(log_p[rows, pset.assignment]) - n * np.log(pset.k))
    coef = -p
    coef[rows, pset.assignment] += 1.0
    grad_v = (coef / pset.phi) @ pset.centroids
    return value, backward(params, inputs, grad_v)


def m_step_epoch(state, inputs, cfg, aug_cfg, rng=None):
    """One pass of minibatch SGD on ProtoNCE; returns the epoch's loss summary."""
    n = inputs.shape[0]
    if rng is None:
        rng = make_rng(cfg.seed, "mstep", state.epoch)
    in_proto = proto_phase(cfg, state.epoch)
    if in_proto and not state.psets:
        raise ValueError(f"epoch {state.epoch} is past warm-up but no prototype sets are present")
    psets = state.psets if in_proto else []
    use_instance = not (in_proto and cfg.loss_mode == "proto")
    lr = lr_at(cfg, state.epoch)
    perm = rng.permutation(n)
    sums = {"loss": 0.0, "instance": 0.0, "proto": np.zeros(len(psets))}
    for start in range(0, n, cfg.batch_size):
        idx = perm[start:start + cfg.batch_size]
        xb = inputs[idx]
        xq = augment(xb, aug_cfg, rng)
        xk = augment(xb, aug_cfg, rng)
        v = encode(state.params, xq)
        v_pos = encode(state.params, xk, use_momentum=True)
        lv = proto_nce(v, v_pos, idx, state.bank, psets, cfg, rng, use_instance=use_instance)
        if not np.isfinite(lv.loss):
            raise NumericError(f"epoch {state.epoch}, batch at {start}: non-finite loss")
        grads = backward(state.params, xq, lv.grad)
        try:
            sgd_step(state.params, grads, lr, cfg.momentum, cfg.weight_decay)
        except NumericError as exc:
            raise NumericError(f"epoch {state.epoch}, batch at {start}: {exc}") from exc
        momentum_update(state.params, cfg.m_ema)
        w = idx.size / n
        sums["loss"] += w * lv.loss
        sums["instance"] += w * lv.instance
        if psets:
            sums["proto"] += w * np.asarray(lv.proto)
    return {"lr": lr, **sums}


def _record(epoch, summary, cfg, psets, f_before, f_after):
    rec = {
        "epoch": epoch,
        "lr": summary["lr"],
        "loss": summary["loss"],
        "instance_loss": summary["instance"],
    }
    for m in range(len(cfg.K) if cfg.M else 0):
        if psets:
            mean, std, _ = cluster_size_stats(psets[m].member_count)
            rec[f"proto_loss_{m}"] = float(summary["proto"][m])
            rec[f"F_before_{m}"] = f_before[m]
            rec[f"F_after_{m}"] = f_after[m]
            rec[f"cluster_size_mean_{m}"] = mean
            rec[f"cluster_size_std_{m}"] = std
        else:
            rec[f"proto_loss_{m}"] = 0.0
    return rec


def train(dataset, cfg, net_spec, aug_cfg=None, out_dir=None, callback=None):
    """Run ``cfg.epochs`` epochs of the EM loop.

    ``dataset`` is a :class:`~pcl.data.LabeledDataset` or a raw input matrix;
    labels are never read.  With ``out_dir`` the metrics log, checkpoints and
    prototype sets are written there.  ``callback(state)`` runs after each
    epoch.  Returns ``(state, records)``.
    """
    inputs = np.ascontiguousarray(getattr(dataset, "inputs", dataset), dtype=np.float64)
    if aug_cfg is None:
        aug_cfg = AugmentConfig()
    cfg.check_dataset(inputs.shape[0])
    params = init_params(net_spec, derive_seed(cfg.seed, "init"))
    state = TrainState(params)
    every = cfg.checkpoint_every or max(1, cfg.epochs // 10)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    lines = []
    for epoch in range(cfg.epochs):
        state.epoch = epoch
        t0 = time.perf_counter()
        if proto_phase(cfg, epoch):
            e_step(state, inputs, cfg)
        else:
            state.psets = []
            refresh_bank(state, inputs)
        f_before = [surrogate_lower_bound(state.params, inputs, ps) for ps in state.psets]
        summary = m_step_epoch(state, inputs, cfg, aug_cfg)
        f_after = [surrogate_lower_bound(state.params, inputs, ps) for ps in state.psets]
        rec = _record(epoch, summary, cfg, state.psets, f_before, f_after)
        state.history.append(rec)
        state.timings.append(time.perf_counter() - t0)
        if out_dir is not None:
            lines.append(format_record(rec) + "\n")
            atomic_write_text(os.path.join(out_dir, "metrics.log"), "".join(lines))
            atomic_write_text(os.path.join(out_dir, "timing.log"),
                              "".join(f"epoch={e} wall_time={t!r}\n" for e, t in enumerate(state.timings)))
            if (epoch + 1) % every == 0 or epoch + 1 == cfg.epochs:
                save_checkpoint(os.path.join(out_dir, f"ckpt_{epoch + 1:04d}.pclk"), state.params)
                save_checkpoint(os.path.join(out_dir, "final.pclk"), state.params)
                if state.psets:
                    save_prototypes(os.path.join(out_dir, f"protos_{epoch + 1:04d}.pclp"), state.psets)
                    save_prototypes(os.path.join(out_dir, "final.pclp"), state.psets)
        if callback is not None:
            callback(state)
    state.epoch = cfg.epochs
    return state, state.history


def full_batch_m_step(params, inputs, pset, max_steps=500, step=1.0, grad_tol=1e-8):
    """Maximize ``F`` for a frozen prototype set by gradient ascent with backtracking.

    A step is accepted only if it satisfies the Armijo condition, so the
    recorded trace of ``F`` never decreases.  Returns that trace.
    """
    value, grads = surrogate_gradient(params, inputs, pset)
    trace = [value]
    for _ in range(max_steps):
        gnorm2 = sum(float(np.sum(g * g)) for g in grads)
        if np.sqrt(gnorm2) < grad_tol:
            break
        saved = [p.copy() for p in params.main]
        accepted = False
        while step > 1e-12:
            for p, s, g in zip(params.main, saved, grads):
                np.copyto(p, s + step * g)
            try:
                new_value = surrogate_lower_bound(params, inputs, pset)
            except ArithmeticError:
                new_value = -np.inf
            if new_value >= value + 1e-4 * step * gnorm2:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            for p, s in zip(params.main, saved):
                np.copyto(p, s)
            break
        gain = new_value - value
        value, grads = surrogate_gradient(params, inputs, pset)
        trace.append(value)
        step *= 2.0
        if gain < 1e-10 * max(1.0, abs(value)):
            break
    params.momentum = [p.copy() for p in params.main]
    return trace


def em_full_batch(inputs, net_spec, k, rounds=10, tau=0.1, alpha=10.0, seed=0, max_steps=500):
    """EM with each M-step run to convergence on the exact (unsampled) surrogate.

    The E-step clusters the current encoder's features (the momentum copy is
    kept equal to the encoder), estimates concentrations, and freezes both
    for the M-step.  Returns one dict per round with ``F_before``,
    ``F_after`` and the per-step ``trace``.
    """
    inputs = np.ascontiguousarray(inputs, dtype=np.float64)
    params = init_params(net_spec, derive_seed(seed, "init"))
    out = []
    for t in range(rounds):
        feats = encode(params, inputs, use_momentum=True)
        clustering = kmeans(feats, k, seed=derive_seed(seed, "kmeans", t))
        pset = build_prototype_set(clustering, feats, alpha, tau)
        trace = full_batch_m_step(params, inputs, pset, max_steps=max_steps)
        out.append({"round": t, "F_before": trace[0], "F_after": trace[-1], "trace": trace, "pset": pset})
    return out

