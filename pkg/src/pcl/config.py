"""Run configuration: sectioned ``key = value`` text plus ``--key value`` overrides.

::

    [run]
    seed = 3

    [train]
    K = 16, 32
    epochs = 30

Every key is typed and validated before anything runs; unknown sections or
keys are errors that name the offending line.  Override keys may be written
``--section.key`` or, when the name is unique across sections, ``--key``.
"""
from dataclasses import dataclass, field, replace

from ._rng import derive_seed
from .data import AugmentConfig
from .encoder import NetSpec
from .errors import ConfigError, InvalidSpecError
from .experiments import SMOKE_AUG, SMOKE_DATA, SMOKE_NET, SMOKE_TEST_FRACTION, SMOKE_TRAIN, KNN_K, KNN_TAU
from .trainer import TrainConfig


def _int(text):
    return int(text)


def _float(text):
    return float(text)


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _int_list(text):
    text = text.strip()
    if not text:
        return ()
    return tuple(int(part) for part in text.split(","))


def _str(text):
    return text.strip()


_TRAIN_TYPES = {
    "tau": _float, "alpha": _float, "r": _int, "K": _int_list, "m_ema": _float, "warmup": _int,
    "epochs": _int, "batch_size": _int, "lr": _float, "lr_milestones": _int_list, "lr_factor": _float,
    "momentum": _float, "weight_decay": _float, "loss_mode": _str, "fixed_phi": _bool,
    "kmeans_iters": _int, "kmeans_tol": _float, "checkpoint_every": _int,
}

SCHEMA = {
    "run": {"seed": (_int, 0)},
    "data": {
        "n_coarse": (_int, SMOKE_DATA["n_coarse"]),
        "fine_per_coarse": (_int, SMOKE_DATA["fine_per_coarse"]),
        "samples_per_fine": (_int, SMOKE_DATA["samples_per_fine"]),
        "d_in": (_int, SMOKE_DATA["d_in"]),
        "coarse_sep": (_float, SMOKE_DATA["coarse_sep"]),
        "fine_sep": (_float, SMOKE_DATA["fine_sep"]),
        "noise": (_float, SMOKE_DATA["noise"]),
        "test_fraction": (_float, SMOKE_TEST_FRACTION),
    },
    "net": {
        "hidden": (_int_list, SMOKE_NET["hidden"]),
        "output_dim": (_int, SMOKE_NET["output_dim"]),
        "nonlinearity": (_str, "relu"),
    },
    "augment": {
        "sigma_aug": (_float, SMOKE_AUG.sigma_aug),
        "p_mask": (_float, SMOKE_AUG.p_mask),
    },
    "train": {key: (conv, getattr(SMOKE_TRAIN, key)) for key, conv in _TRAIN_TYPES.items()},
    "eval": {
        "knn_k": (_int, KNN_K),
        "knn_tau": (_float, KNN_TAU),
        "mi_k": (_int, 3),
        "probe_iters": (_int, 500),
        "probe_lr": (_float, 0.5),
        "hist_bins": (_int, 10),
    },
}


def _owners():
    owners = {}
    for section, keys in SCHEMA.items():
        for key in keys:
            owners.setdefault(key, []).append(section)
    return owners


@dataclass
class RunConfig:
    seed: int = 0
    data: dict = field(default_factory=dict)
    net: NetSpec = None
    augment: AugmentConfig = None
    train: TrainConfig = None
    eval: dict = field(default_factory=dict)

    def seed_for(self, subsystem):
        return derive_seed(self.seed, subsystem)

    def train_config(self, **changes):
        return replace(self.train, seed=self.seed_for("train"), **changes)

    def to_text(self):
        """Canonical config text; parsing it gives back an equal RunConfig."""
        values = {
            "run": {"seed": self.seed},
            "data": self.data,
            "net": {"hidden": self.net.hidden, "output_dim": self.net.output_dim,
                    "nonlinearity": self.net.nonlinearity},
            "augment": {"sigma_aug": self.augment.sigma_aug, "p_mask": self.augment.p_mask},
            "train": {k: getattr(self.train, k) for k in _TRAIN_TYPES},
            "eval": self.eval,
        }
        out = []
        for section in SCHEMA:
            out.append(f"[{section}]")
            for key in SCHEMA[section]:
                val = values[section][key]
                if isinstance(val, (tuple, list)):
                    val = ", ".join(str(v) for v in val)
                elif isinstance(val, float):
                    val = repr(val)
                out.append(f"{key} = {val}")
            out.append("")
        return "\n".join(out)


def parse_config_text(text, path=None):
    """Parse config text into ``{section: {key: (value, lineno)}}`` with type checks."""
    raw = {}
    section = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped[0] in "#;":
            continue
        if stripped.startswith("["):
            if not stripped.endswith("]"):
                raise ConfigError(f"malformed section header {stripped!r}", lineno, path)
            section = stripped[1:-1].strip()
            if section not in SCHEMA:
                raise ConfigError(f"unknown section [{section}]", lineno, path)
            raw.setdefault(section, {})
            continue
        key, sep, value = stripped.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"expected 'key = value', got {stripped!r}", lineno, path)
        if section is None:
            raise ConfigError(f"key {key!r} appears before any [section]", lineno, path)
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown key {key!r} in [{section}]", lineno, path)
        if key in raw[section]:
            raise ConfigError(f"duplicate key {key!r} in [{section}]", lineno, path)
        conv = SCHEMA[section][key][0]
        try:
            raw[section][key] = (conv(value.strip()), lineno)
        except ValueError as exc:
            raise ConfigError(f"bad value for {section}.{key}: {exc}", lineno, path) from None
    return raw


def apply_overrides(raw, overrides):
    """Merge ``[(key, text), ...]`` command-line overrides into a parsed config."""
    owners = _owners()
    for key, text in overrides:
        if "." in key:
            section, _, name = key.partition(".")
            if section not in SCHEMA or name not in SCHEMA[section]:
                raise ConfigError(f"unknown override --{key}")
        else:
            sections = owners.get(key, [])
            if not sections:
                raise ConfigError(f"unknown override --{key}")
            if len(sections) > 1:
                raise ConfigError(f"ambiguous override --{key}; use one of "
                                  + ", ".join(f"--{s}.{key}" for s in sections))
            section, name = sections[0], key
        try:
            value = SCHEMA[section][name][0](text)
        except ValueError as exc:
            raise ConfigError(f"bad value for override --{key}: {exc}") from None
        raw.setdefault(section, {})[name] = (value, None)
    return raw


def build_run_config(raw, path=None):
    def get(section, key):
        entry = raw.get(section, {}).get(key)
        return entry[0] if entry is not None else SCHEMA[section][key][1]

    def line_of(section, keys):
        for key in keys:
            entry = raw.get(section, {}).get(key)
            if entry is not None and entry[1] is not None:
                return entry[1]
        return None

    data = {key: get("data", key) for key in SCHEMA["data"]}
    if not data["coarse_sep"] > data["fine_sep"] > data["noise"] > 0:
        raise ConfigError("need coarse_sep > fine_sep > noise > 0",
                          line_of("data", ("coarse_sep", "fine_sep", "noise")), path)
    for key in ("n_coarse", "fine_per_coarse", "samples_per_fine", "d_in"):
        if data[key] < 1:
            raise ConfigError(f"data.{key} must be >= 1", line_of("data", (key,)), path)
    if not 0.0 < data["test_fraction"] < 1.0:
        raise ConfigError("data.test_fraction must be in (0, 1)", line_of("data", ("test_fraction",)), path)

    try:
        net = NetSpec(data["d_in"], get("net", "hidden"), get("net", "output_dim"), get("net", "nonlinearity"))
    except InvalidSpecError as exc:
        raise ConfigError(str(exc), line_of("net", SCHEMA["net"]), path) from None
    try:
        augment = AugmentConfig(get("augment", "sigma_aug"), get("augment", "p_mask"))
    except ConfigError as exc:
        raise ConfigError(str(exc), line_of("augment", SCHEMA["augment"]), path) from None
    try:
        train = TrainConfig(**{key: get("train", key) for key in _TRAIN_TYPES})
    except ConfigError as exc:
        raise ConfigError(str(exc), line_of("train", _TRAIN_TYPES), path) from None
    n_train = data["n_coarse"] * data["fine_per_coarse"] * data["samples_per_fine"]
    if train.M and max(train.K) > n_train:
        raise ConfigError(f"cluster count {max(train.K)} exceeds the {n_train} generated samples",
                          line_of("train", ("K",)), path)

    ev = {key: get("eval", key) for key in SCHEMA["eval"]}
    for key in ("knn_k", "mi_k", "probe_iters", "hist_bins"):
        if ev[key] < 1:
            raise ConfigError(f"eval.{key} must be >= 1", line_of("eval", (key,)), path)
    for key in ("knn_tau", "probe_lr"):
        if not ev[key] > 0:
            raise ConfigError(f"eval.{key} must be > 0", line_of("eval", (key,)), path)
    return RunConfig(get("run", "seed"), data, net, augment, train, ev)


def load_run_config(path=None, overrides=()):
    """Read, override and validate; ``path=None`` starts from the defaults."""
    raw = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        raw = parse_config_text(text, path)
    apply_overrides(raw, overrides)
    return build_run_config(raw, path)
