"""Synthetic hierarchical mixtures, augmentation views, and dataset files.

Samples come from ``n_coarse`` coarse classes, each split into
``fine_per_coarse`` fine classes.  Labels are only ever read by evaluation.
"""
from dataclasses import dataclass, field
import json
import struct

import numpy as np

from ._rng import make_rng
from .errors import ConfigError
from .serialization import Reader, atomic_write_bytes, atomic_write_text, pack_f64, pack_i64

DATA_MAGIC = b"PCLD1"
_MAX_TRIES = 10_000


@dataclass
class LabeledDataset:
    inputs: np.ndarray
    fine: np.ndarray
    coarse: np.ndarray
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.ascontiguousarray(self.inputs, dtype=np.float64)
        self.fine = np.asarray(self.fine, dtype=np.int64)
        self.coarse = np.asarray(self.coarse, dtype=np.int64)
        n = self.inputs.shape[0]
        if self.fine.shape != (n,) or self.coarse.shape != (n,):
            raise ValueError("label arrays must have one entry per input row")

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def n_fine(self):
        return int(self.fine.max()) + 1 if len(self) else 0

    @property
    def n_coarse(self):
        return int(self.coarse.max()) + 1 if len(self) else 0

    def subset(self, idx):
        idx = np.asarray(idx)
        return LabeledDataset(self.inputs[idx], self.fine[idx], self.coarse[idx], dict(self.config))


@dataclass(frozen=True)
class AugmentConfig:
    sigma_aug: float = 0.0
    p_mask: float = 0.0

    def __post_init__(self):
        if not self.sigma_aug >= 0:
            raise ConfigError(f"sigma_aug must be >= 0, got {self.sigma_aug}")
        if not 0.0 <= self.p_mask < 1.0:
            raise ConfigError(f"p_mask must be in [0, 1), got {self.p_mask}")


def _spread_directions(rng, count, dim, min_angle_cos):
    """Random unit vectors whose pairwise cosine is at most ``min_angle_cos``."""
    for _ in range(_MAX_TRIES):
        u = rng.standard_normal((count, dim))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        gram = u @ u.T
        np.fill_diagonal(gram, -1.0)
        if gram.max() <= min_angle_cos:
            return u
    raise ValueError(f"could not place {count} separated directions in {dim} dimensions")


def gen_hierarchical_mixture(n_coarse, fine_per_coarse, samples_per_fine, d_in,
                             coarse_sep, fine_sep, noise, seed=0):
    """Balanced two-level Gaussian mixture.

    Coarse centers sit at radius ``coarse_sep`` with pairwise distance at
    least ``coarse_sep``; fine centers sit at distance ``fine_sep`` from their
    coarse center, again pairwise at least ``fine_sep`` apart; samples add
    isotropic Gaussian noise with per-coordinate std ``noise``.
    """
    for name, val in (("n_coarse", n_coarse), ("fine_per_coarse", fine_per_coarse),
                      ("samples_per_fine", samples_per_fine), ("d_in", d_in)):
        if int(val) < 1:
            raise ValueError(f"{name} must be >= 1, got {val}")
    if not coarse_sep > fine_sep > noise > 0:
        raise ValueError("need coarse_sep > fine_sep > noise > 0")
    rng = make_rng(seed, "mixture")
    # pairwise distance >= radius on a sphere of that radius <=> cosine <= 1/2
    coarse_centers = coarse_sep * _spread_directions(rng, n_coarse, d_in, 0.5)
    inputs, fine, coarse = [], [], []
    for c in range(n_coarse):
        offsets = fine_sep * _spread_directions(rng, fine_per_coarse, d_in, 0.5)
        for f in range(fine_per_coarse):
            center = coarse_centers[c] + offsets[f]
            inputs.append(center + noise * rng.standard_normal((samples_per_fine, d_in)))
            fine += [c * fine_per_coarse + f] * samples_per_fine
            coarse += [c] * samples_per_fine
    config = dict(n_coarse=n_coarse, fine_per_coarse=fine_per_coarse, samples_per_fine=samples_per_fine,
                  d_in=d_in, coarse_sep=coarse_sep, fine_sep=fine_sep, noise=noise, seed=seed)
    return LabeledDataset(np.vstack(inputs), fine, coarse, config)


def split_dataset(ds, test_fraction, seed=0):
    """Stratified (by fine label) train/test split."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
    rng = make_rng(seed, "split")
    test = []
    for label in np.unique(ds.fine):
        members = np.flatnonzero(ds.fine == label)
        members = rng.permutation(members)
        test.append(members[: int(round(test_fraction * members.size))])
    test = np.sort(np.concatenate(test))
    train = np.setdiff1d(np.arange(len(ds)), test)
    return ds.subset(train), ds.subset(test)


def augment(x, cfg, rng):
    """Additive Gaussian noise then independent zero-masking of coordinates."""
    x = np.asarray(x, dtype=np.float64)
    out = x.copy()
    if cfg.sigma_aug > 0:
        out += cfg.sigma_aug * rng.standard_normal(x.shape)
    if cfg.p_mask > 0:
        out[rng.random(x.shape) < cfg.p_mask] = 0.0
    return out


def dataset_bytes(ds):
    meta = json.dumps(ds.config, sort_keys=True).encode("utf-8")
    n, d = ds.inputs.shape
    return b"".join([
        DATA_MAGIC,
        struct.pack("<QQ", n, d),
        pack_f64(ds.inputs),
        pack_i64(ds.fine),
        pack_i64(ds.coarse),
        struct.pack("<I", len(meta)),
        meta,
    ])


def save_dataset(path, ds):
    atomic_write_bytes(path, dataset_bytes(ds))


def load_dataset(path):
    with open(path, "rb") as fh:
        rd = Reader(fh.read(), "dataset file")
    if rd.take(5) != DATA_MAGIC:
        raise ValueError(f"{path}: not a dataset file")
    n, d = rd.unpack("<QQ")
    inputs = rd.f64((n, d))
    fine = rd.i64((n,))
    coarse = rd.i64((n,))
    config = {}
    if not rd.at_end():
        (size,) = rd.unpack("<I")
        config = json.loads(rd.take(size).decode("utf-8"))
    return LabeledDataset(inputs, fine, coarse, config)


def export_csv(path, ds):
    lines = []
    for row, f, c in zip(ds.inputs, ds.fine, ds.coarse):
        lines.append(",".join(repr(float(v)) for v in row) + f",{int(f)},{int(c)}\n")
    atomic_write_text(path, "".join(lines))
