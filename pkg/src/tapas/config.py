"""Flat key=value experiment configuration with named presets.

A config is a dict from dotted key to string value, assembled from an
optional preset, an optional config file, and command-line overrides, in
that order. Keys are checked against a registry so typos fail loudly.
`build_experiment` turns the resolved dict into typed config objects.

Sweeps are described by `sweep.grid`, either one key with a value list
("tapas.r=1,2,4,8") or several keys with colon-grouped tuples
("tapas.n,tapas.r=64:8,128:4,512:1"), crossed with `sweep.seeds`.
"""

from __future__ import annotations

from dataclasses import dataclass

from .data_synth import GaussianMixtureSpec, NonlinearGenSpec
from .train import ModelConfig, TrainConfig
from .two_pass import TapasConfig

# key -> expected type tag, used only for registry validation messages
KNOWN_KEYS = {
    "data.kind": "str",
    "data.n_classes": "int",
    "data.dim": "int",
    "data.centroid_scale": "float",
    "data.seed": "int",
    "data.centroid_dim": "int",
    "data.noise_dim": "int",
    "data.hidden_dim": "int",
    "data.out_dim": "int",
    "data.noise_sigma": "float",
    "data.train_count": "int",
    "data.test_count": "int",
    "data.train_path": "str",
    "data.test_path": "str",
    "model.kind": "str",
    "model.emb_dim": "int",
    "model.hidden": "int",
    "model.label_bias": "bool",
    "train.batch_size": "int",
    "train.steps": "int",
    "train.eval_every": "int",
    "train.lr": "float",
    "train.epsilon": "float",
    "train.l2": "float",
    "train.loss_mode": "str",
    "train.seed": "int",
    "train.record_samples": "bool",
    "sampler.alpha": "float",
    "sampler.beta": "float",
    "tapas.n": "int",
    "tapas.r": "int",
    "tapas.tau0": "float",
    "tapas.tau_decay": "float",
    "tapas.tau_min": "float",
    "shards.m": "int",
    "eval.ks": "str",
    "eval.map_variant": "str",
    "loss.logq_correction": "bool",
    "sweep.grid": "str",
    "sweep.seeds": "str",
}


class ConfigError(ValueError):
    """Raised for malformed config text, unknown keys, or bad values."""


def parse_config_text(text: str) -> dict[str, str]:
    """Parse "key = value" lines; '#' starts a comment, blanks are skipped."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        value = value.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = value
    return out


def load_config_file(path) -> dict[str, str]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def validate_keys(cfg: dict[str, str]) -> None:
    unknown = sorted(set(cfg) - set(KNOWN_KEYS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")


def merge(*layers: dict[str, str]) -> dict[str, str]:
    """Later layers win; all keys validated against the registry."""
    out: dict[str, str] = {}
    for layer in layers:
        out.update(layer)
    validate_keys(out)
    return out


def _get(cfg, key, default):
    return cfg.get(key, default)


def _get_int(cfg, key, default):
    raw = cfg.get(key)
    if raw is None:
        return default
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{key} must be an integer, got {raw!r}") from None


def _get_float(cfg, key, default):
    raw = cfg.get(key)
    if raw is None:
        return default
    if raw.lower() == "none":
        return None
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"{key} must be a number, got {raw!r}") from None


def _get_bool(cfg, key, default):
    raw = cfg.get(key)
    if raw is None:
        return default
    low = raw.lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ConfigError(f"{key} must be a boolean, got {raw!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one run needs: data source, model, training, sampling."""

    data_kind: str
    data_spec: GaussianMixtureSpec | NonlinearGenSpec | None
    train_count: int
    test_count: int
    train_path: str | None
    test_path: str | None
    model: ModelConfig
    train: TrainConfig
    tapas: TapasConfig
    shards_m: int


def build_experiment(cfg: dict[str, str]) -> ExperimentConfig:
    """Typed experiment assembly from a validated flat config."""
    validate_keys(cfg)
    try:
        return _build_experiment(cfg)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _build_experiment(cfg: dict[str, str]) -> ExperimentConfig:
    train_path = _get(cfg, "data.train_path", None)
    test_path = _get(cfg, "data.test_path", None)
    if (train_path is None) != (test_path is None):
        raise ConfigError("data.train_path and data.test_path must be given together")

    data_kind = _get(cfg, "data.kind", "linear")
    data_spec = None
    if train_path is not None:
        data_kind = "files"
    elif data_kind == "linear":
        data_spec = GaussianMixtureSpec(
            n_classes=_get_int(cfg, "data.n_classes", 1000),
            dim=_get_int(cfg, "data.dim", 50),
            centroid_scale=_get_float(cfg, "data.centroid_scale", 3.0),
            seed=_get_int(cfg, "data.seed", 0),
        )
    elif data_kind == "nonlinear":
        data_spec = NonlinearGenSpec(
            n_classes=_get_int(cfg, "data.n_classes", 10_000),
            centroid_dim=_get_int(cfg, "data.centroid_dim", 10),
            noise_dim=_get_int(cfg, "data.noise_dim", 10),
            hidden_dim=_get_int(cfg, "data.hidden_dim", 50),
            out_dim=_get_int(cfg, "data.out_dim", 25),
            noise_sigma=_get_float(cfg, "data.noise_sigma", 1.0),
            centroid_scale=_get_float(cfg, "data.centroid_scale", 3.0),
            seed=_get_int(cfg, "data.seed", 0),
        )
    else:
        raise ConfigError(f"data.kind must be linear or nonlinear, got {data_kind!r}")

    model = ModelConfig(
        kind=_get(cfg, "model.kind", "linear"),
        emb_dim=_get_int(cfg, "model.emb_dim", 50),
        hidden=_get_int(cfg, "model.hidden", 50),
        label_bias=_get_bool(cfg, "model.label_bias", False),
    )
    ks_raw = _get(cfg, "eval.ks", "1")
    try:
        eval_ks = tuple(int(part) for part in ks_raw.split(",") if part.strip())
    except ValueError:
        raise ConfigError(f"eval.ks must be comma-separated integers, got {ks_raw!r}") from None
    train = TrainConfig(
        batch_size=_get_int(cfg, "train.batch_size", 16),
        steps=_get_int(cfg, "train.steps", 1000),
        eval_every=_get_int(cfg, "train.eval_every", 250),
        lr=_get_float(cfg, "train.lr", 0.1),
        epsilon=_get_float(cfg, "train.epsilon", 1e-8),
        l2=_get_float(cfg, "train.l2", 0.0),
        loss_mode=_get(cfg, "train.loss_mode", "tapas"),
        seed=_get_int(cfg, "train.seed", 0),
        sampler_alpha=_get_float(cfg, "sampler.alpha", 0.75),
        sampler_beta=_get_float(cfg, "sampler.beta", None),
        eval_ks=eval_ks,
        map_variant=_get(cfg, "eval.map_variant", "paper"),
        logq_correction=_get_bool(cfg, "loss.logq_correction", False),
        record_samples=_get_bool(cfg, "train.record_samples", False),
    )
    tapas = TapasConfig(
        n=_get_int(cfg, "tapas.n", 16),
        r=_get_int(cfg, "tapas.r", 1),
        tau0=_get_float(cfg, "tapas.tau0", 1.0),
        tau_decay=_get_float(cfg, "tapas.tau_decay", 1.0),
        tau_min=_get_float(cfg, "tapas.tau_min", 0.01),
    )
    return ExperimentConfig(
        data_kind=data_kind,
        data_spec=data_spec,
        train_count=_get_int(cfg, "data.train_count", 100_000),
        test_count=_get_int(cfg, "data.test_count", 10_000),
        train_path=train_path,
        test_path=test_path,
        model=model,
        train=train,
        tapas=tapas,
        shards_m=_get_int(cfg, "shards.m", 1),
    )


def parse_grid(spec: str) -> list[dict[str, str]]:
    """Grid points from "k=v1,v2" or "k1,k2=v1:w1,v2:w2" syntax."""
    if "=" not in spec:
        raise ConfigError(f"sweep.grid must look like key=v1,v2,..., got {spec!r}")
    lhs, rhs = spec.split("=", 1)
    keys = [k.strip() for k in lhs.split(",") if k.strip()]
    if not keys:
        raise ConfigError("sweep.grid names no keys")
    unknown = sorted(set(keys) - set(KNOWN_KEYS))
    if unknown:
        raise ConfigError(f"sweep.grid uses unknown keys: {', '.join(unknown)}")
    points = []
    for part in rhs.split(","):
        part = part.strip()
        if not part:
            continue
        values = [v.strip() for v in part.split(":")]
        if len(values) != len(keys):
            raise ConfigError(
                f"grid point {part!r} has {len(values)} values for {len(keys)} keys"
            )
        points.append(dict(zip(keys, values)))
    if not points:
        raise ConfigError("sweep.grid is empty")
    return points


def parse_seeds(spec: str) -> list[int]:
    try:
        seeds = [int(part) for part in spec.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"sweep.seeds must be comma-separated integers, got {spec!r}") from None
    if not seeds:
        raise ConfigError("sweep.seeds is empty")
    return seeds


# Presets cover the synthetic benchmarks at two scales: the sizes used by
# the original figures, plus "-small" variants that finish on a laptop.
_LINEAR_BASE = {
    "data.kind": "linear",
    "data.n_classes": "1000",
    "data.dim": "50",
    "data.centroid_scale": "3.0",
    "data.seed": "0",
    "data.train_count": "100000",
    "data.test_count": "10000",
    "model.kind": "linear",
    "model.emb_dim": "50",
    "model.label_bias": "true",
    "train.batch_size": "16",
    "train.steps": "12500",
    "train.eval_every": "250",
    "train.lr": "0.1",
    "train.l2": "0.001",
    "train.loss_mode": "tapas",
    "tapas.n": "16",
    "tapas.r": "4",
    "eval.ks": "1",
}

_NN_BASE = {
    "data.kind": "nonlinear",
    "data.n_classes": "10000",
    "data.centroid_dim": "10",
    "data.noise_dim": "10",
    "data.hidden_dim": "50",
    "data.out_dim": "25",
    "data.noise_sigma": "1.0",
    "data.centroid_scale": "3.0",
    "data.seed": "0",
    "data.train_count": "1000000",
    "data.test_count": "100000",
    "model.kind": "mlp",
    "model.emb_dim": "50",
    "model.hidden": "50",
    "model.label_bias": "false",
    "train.batch_size": "32",
    "train.steps": "31250",
    "train.eval_every": "1000",
    "train.lr": "0.1",
    "train.l2": "0.001",
    "train.loss_mode": "tapas",
    "tapas.n": "64",
    "tapas.r": "8",
    "tapas.tau0": "1.0",
    "tapas.tau_decay": "0.9995",
    "tapas.tau_min": "0.05",
    "eval.ks": "1",
}

_NN_SMALL = dict(
    _NN_BASE,
    **{
        "data.train_count": "200000",
        "data.test_count": "10000",
        "train.steps": "12500",
        "train.eval_every": "500",
    },
)

PRESETS: dict[str, dict[str, str]] = {
    "linear": dict(_LINEAR_BASE),
    "linear-fig1a": dict(_LINEAR_BASE, **{"sweep.grid": "tapas.r=1,2,4,8"}),
    "linear-fig1b": dict(
        _LINEAR_BASE, **{"sweep.grid": "tapas.n,tapas.r=16:8,32:4,64:2,128:1"}
    ),
    "nn": dict(_NN_BASE),
    "nn-small": dict(_NN_SMALL),
    "nn-fig2b": dict(_NN_SMALL, **{"sweep.grid": "tapas.r=1,2,4,8"}),
    "nn-fig2c": dict(_NN_SMALL, **{"sweep.grid": "tapas.n,tapas.r=64:8,128:4,512:1"}),
}


def resolve_preset(name: str) -> dict[str, str]:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(sorted(PRESETS))}")
    return dict(PRESETS[name])
