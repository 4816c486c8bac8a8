"""Smoke-scale experiment presets shared by the ``ablate`` command and the
acceptance suite.

The smoke dataset is 4 coarse x 4 fine classes in 128 dimensions; 2048
training samples (128 per fine class) and 1024 held-out samples.  Signal
lives in the span of the class centers while isotropic noise fills every
coordinate, so a random encoder's neighborhoods are dominated by noise.
Training over-clusters the 16 fine classes at 16, 32 and 64 prototypes.
"""
from dataclasses import dataclass, field, replace

import numpy as np

from ._rng import derive_seed
from .clustering import kmeans
from .data import AugmentConfig, gen_hierarchical_mixture, split_dataset
from .encoder import NetSpec, encode, init_params
from .evaluation import ami, cluster_size_stats, knn_accuracy, mi_discrete, mi_ross
from .trainer import TrainConfig, train

SMOKE_DATA = dict(n_coarse=4, fine_per_coarse=4, samples_per_fine=192, d_in=128,
                  coarse_sep=10.0, fine_sep=5.0, noise=1.0)
SMOKE_TEST_FRACTION = 1 / 3
SMOKE_NET = dict(hidden=(64,), output_dim=16)
SMOKE_AUG = AugmentConfig(sigma_aug=1.0, p_mask=0.0)
SMOKE_TRAIN = TrainConfig(tau=0.2, alpha=1.0, r=256, K=(16, 32, 64), m_ema=0.99, warmup=5, epochs=30,
                          batch_size=128, lr=0.1, lr_milestones=(20,), lr_factor=0.1,
                          momentum=0.9, weight_decay=1e-4)
KNN_K = 20
KNN_TAU = 0.1

ABLATION_VARIANTS = (
    ("instance only", dict(loss_mode="instance")),
    ("proto only (w/o warm-up)", dict(loss_mode="proto", warmup=0)),
    ("proto only (w/ warm-up)", dict(loss_mode="proto")),
    ("instance + proto (w/o warm-up)", dict(loss_mode="both", warmup=0)),
    ("instance + proto (w/ warm-up)", dict(loss_mode="both")),
)


def smoke_split(seed, **overrides):
    params = {**SMOKE_DATA, **overrides}
    ds = gen_hierarchical_mixture(seed=seed, **params)
    return split_dataset(ds, SMOKE_TEST_FRACTION, seed)


def smoke_spec(d_in=SMOKE_DATA["d_in"]):
    return NetSpec(d_in, SMOKE_NET["hidden"], SMOKE_NET["output_dim"])


@dataclass
class RunResult:
    name: str
    seed: int
    knn: float
    ami: float
    cluster_std: list = field(default_factory=list)
    proto_mi: list = field(default_factory=list)  # per post-warm-up epoch, finest granularity
    final_proto_mi: float = float("nan")
    instance_mi: float = float("nan")
    history: list = field(default_factory=list)


def embed_knn(params, train_ds, test_ds, use_momentum=False):
    bank = encode(params, train_ds.inputs, use_momentum)
    query = encode(params, test_ds.inputs, use_momentum)
    return knn_accuracy(query, test_ds.fine, bank, train_ds.fine, KNN_K, KNN_TAU)


def embed_ami(params, ds, k, seed):
    feats = encode(params, ds.inputs)
    clustering = kmeans(feats, k, seed=derive_seed(seed, "eval-kmeans"))
    return ami(clustering.assignment, ds.fine)


def random_init_knn(seed, train_ds, test_ds, spec=None):
    spec = spec or smoke_spec(train_ds.inputs.shape[1])
    return embed_knn(init_params(spec, derive_seed(seed, "init")), train_ds, test_ds)


def run_variant(train_ds, test_ds, cfg, spec=None, aug=SMOKE_AUG, name="", track_mi=False):
    """Train one configuration and collect the smoke-scale measurements."""
    spec = spec or smoke_spec(train_ds.inputs.shape[1])
    proto_mi = []

    def watch(state):
        if track_mi and state.psets:
            proto_mi.append(mi_discrete(state.psets[-1].assignment, train_ds.fine))

    state, history = train(train_ds, cfg, spec, aug, callback=watch)
    result = RunResult(
        name=name,
        seed=cfg.seed,
        knn=embed_knn(state.params, train_ds, test_ds),
        ami=embed_ami(state.params, train_ds, train_ds.n_fine, cfg.seed),
        cluster_std=[cluster_size_stats(ps.member_count)[1] for ps in state.psets],
        proto_mi=proto_mi,
        history=history,
    )
    if track_mi and state.psets:
        result.final_proto_mi = mi_discrete(state.psets[-1].assignment, train_ds.fine)
        result.instance_mi = mi_ross(state.bank.features, train_ds.fine, k=3)
    return result


def run_ablation(train_ds, test_ds, base_cfg=SMOKE_TRAIN, spec=None, aug=SMOKE_AUG):
    """All five loss/warm-up variants on one dataset; returns a list of RunResult."""
    return [run_variant(train_ds, test_ds, replace(base_cfg, **changes), spec, aug, name)
            for name, changes in ABLATION_VARIANTS]


def format_ablation_table(results):
    width = max(len(r.name) for r in results)
    lines = [f"{'variant':<{width}}  knn_acc  ami", f"{'-' * width}  -------  ------"]
    lines += [f"{r.name:<{width}}  {r.knn:7.4f}  {r.ami:6.4f}" for r in results]
    return "\n".join(lines) + "\n"


def mean_std(values):
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())
