"""Feedforward embedding network with an L2-normalized output.

Parameters are kept as flat lists ``[W0, b0, W1, b1, ...]`` with ``W`` of
shape ``(fan_in, fan_out)`` so a layer is ``a @ W + b``.  Three parallel lists
hold the trained weights, the momentum (EMA) copy and the SGD velocity.
"""
from dataclasses import dataclass, field
import struct

import numpy as np

from .errors import DegenerateEmbeddingError, InvalidSpecError, NumericError
from .serialization import Reader, atomic_write_bytes, pack_f64

NORM_EPS = 1e-12
CHECKPOINT_MAGIC = b"PCLK1"
NONLINEARITIES = ("relu",)


@dataclass(frozen=True)
class NetSpec:
    input_dim: int
    hidden: tuple = ()
    output_dim: int = 2
    nonlinearity: str = "relu"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        dims = self.dims
        if any(d < 1 for d in dims):
            raise InvalidSpecError(f"all layer widths must be >= 1, got {dims}")
        if self.output_dim < 2:
            raise InvalidSpecError(f"embedding dimension must be >= 2, got {self.output_dim}")
        if self.nonlinearity not in NONLINEARITIES:
            raise InvalidSpecError(f"unknown nonlinearity {self.nonlinearity!r}")

    @property
    def dims(self):
        return (int(self.input_dim), *self.hidden, int(self.output_dim))

    @property
    def n_layers(self):
        return len(self.dims) - 1


@dataclass
class _Cache:
    x: np.ndarray
    acts: list  # input to each layer
    pres: list  # pre-activation of each layer; the last one is the raw output z
    norms: np.ndarray
    v: np.ndarray


@dataclass(eq=False)
class EncoderParams:
    spec: NetSpec
    main: list
    momentum: list
    velocity: list
    cache: _Cache = field(default=None, repr=False)

    def n_parameters(self):
        return int(sum(p.size for p in self.main))

    def copy(self):
        return EncoderParams(
            self.spec,
            [p.copy() for p in self.main],
            [p.copy() for p in self.momentum],
            [p.copy() for p in self.velocity],
        )

    def all_finite(self):
        return all(np.all(np.isfinite(p)) for p in (*self.main, *self.momentum, *self.velocity))


def init_params(spec, seed=None):
    """He-initialized weights, zero biases, momentum copy equal to the weights."""
    if seed is None:
        seed = spec.seed
    rng = np.random.default_rng(seed)
    main = []
    for fan_in, fan_out in zip(spec.dims[:-1], spec.dims[1:]):
        main.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)))
        main.append(np.zeros(fan_out))
    return EncoderParams(
        spec,
        main,
        [p.copy() for p in main],
        [np.zeros_like(p) for p in main],
    )


def _forward(tensors, x):
    acts, pres = [], []
    a = x
    n_layers = len(tensors) // 2
    for layer in range(n_layers):
        W, b = tensors[2 * layer], tensors[2 * layer + 1]
        acts.append(a)
        pre = a @ W + b
        pres.append(pre)
        a = np.maximum(pre, 0.0) if layer < n_layers - 1 else pre
    return acts, pres


def encode(params, x, use_momentum=False):
    """Map inputs (n, input_dim) to unit-norm embeddings (n, output_dim).

    With ``use_momentum=False`` the forward activations are cached on
    ``params`` for a following :func:`backward` call.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.spec.input_dim:
        raise ValueError(f"expected inputs with {params.spec.input_dim} columns, got shape {x.shape}")
    tensors = params.momentum if use_momentum else params.main
    acts, pres = _forward(tensors, x)
    z = pres[-1]
    norms = np.sqrt(np.einsum("ij,ij->i", z, z))
    if norms.size and norms.min() < NORM_EPS:
        bad = int(np.argmin(norms))
        raise DegenerateEmbeddingError(f"row {bad} has pre-normalization norm {norms[bad]:.3e} < {NORM_EPS}")
    v = z / norms[:, None]
    if not use_momentum:
        params.cache = _Cache(x, acts, pres, norms, v)
    return v


def normalize_backward(v, norms, grad_v):
    """Pull a gradient through ``v = z / |z|``: returns ``(g - (g.v) v) / |z|``."""
    radial = np.einsum("ij,ij->i", grad_v, v)
    return (grad_v - radial[:, None] * v) / norms[:, None]


def backward(params, x, grad_v):
    """Gradients of a scalar loss w.r.t. every main parameter.

    ``grad_v`` is dLoss/dv for the embeddings of ``x``.  Uses the cache left
    by :func:`encode` when it belongs to ``x``; otherwise re-runs the forward
    pass.  The momentum copy never receives gradient.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    cache = params.cache
    if cache is None or not (cache.x is x or (cache.x.shape == x.shape and np.array_equal(cache.x, x))):
        encode(params, x)
        cache = params.cache
    grad_v = np.asarray(grad_v, dtype=np.float64)
    if grad_v.shape != cache.v.shape:
        raise ValueError(f"gradient shape {grad_v.shape} does not match embeddings {cache.v.shape}")

    grads = [None] * len(params.main)
    delta = normalize_backward(cache.v, cache.norms, grad_v)
    for layer in reversed(range(params.spec.n_layers)):
        W = params.main[2 * layer]
        grads[2 * layer] = cache.acts[layer].T @ delta
        grads[2 * layer + 1] = delta.sum(axis=0)
        if layer > 0:
            delta = (delta @ W.T) * (cache.pres[layer - 1] > 0.0)
    return grads


def sgd_step(params, grads, lr, momentum=0.9, weight_decay=1e-4):
    """In-place SGD with heavy-ball momentum and L2 weight decay on all tensors."""
    if not lr > 0:
        raise ValueError(f"lr must be > 0, got {lr}")
    if not 0.0 <= momentum < 1.0:
        raise ValueError(f"momentum must be in [0, 1), got {momentum}")
    if weight_decay < 0:
        raise ValueError(f"weight_decay must be >= 0, got {weight_decay}")
    if len(grads) != len(params.main):
        raise ValueError("gradient list does not match parameter list")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient entry")
    for p, vel, g in zip(params.main, params.velocity, grads):
        vel *= momentum
        vel += g + weight_decay * p
        p -= lr * vel
    return params


def momentum_update(params, m):
    """EMA update of the momentum copy: ``theta' <- m theta' + (1 - m) theta``."""
    if not 0.0 <= m < 1.0:
        raise ValueError(f"EMA coefficient must be in [0, 1), got {m}")
    for pm, p in zip(params.momentum, params.main):
        pm *= m
        pm += (1.0 - m) * p
    return params


def _spec_header(spec):
    dims = spec.dims
    tag = spec.nonlinearity.encode("ascii")
    return (
        struct.pack("<I", len(dims))
        + struct.pack(f"<{len(dims)}I", *dims)
        + struct.pack("<B", len(tag))
        + tag
        + struct.pack("<q", int(spec.seed))
    )


def checkpoint_bytes(params):
    parts = [CHECKPOINT_MAGIC, _spec_header(params.spec)]
    for group in (params.main, params.momentum, params.velocity):
        parts.extend(pack_f64(t) for t in group)
    return b"".join(parts)


def save_checkpoint(path, params):
    atomic_write_bytes(path, checkpoint_bytes(params))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        rd = Reader(fh.read(), "checkpoint")
    if rd.take(5) != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic")
    (n_dims,) = rd.unpack("<I")
    dims = rd.unpack(f"<{n_dims}I")
    (tag_len,) = rd.unpack("<B")
    tag = rd.take(tag_len).decode("ascii")
    (seed,) = rd.unpack("<q")
    spec = NetSpec(dims[0], tuple(dims[1:-1]), dims[-1], tag, seed)
    shapes = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        shapes += [(fan_in, fan_out), (fan_out,)]
    groups = [[rd.f64(s) for s in shapes] for _ in range(3)]
    if not rd.at_end():
        raise ValueError(f"{path}: trailing bytes after checkpoint tensors")
    return EncoderParams(spec, *groups)
