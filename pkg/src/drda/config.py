"""Training and run configuration, JSON round-tripping, and named presets."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace

from .errors import ConfigError


@dataclass(frozen=True)
class TrainConfig:
    # loss weights
    lambda_T: float = 200.0
    lambda_phi: float = 0.6
    lambda_ot: float = 0.0005
    lambda_R: float = 1.0
    lambda_dist: float = 1.0
    # radial structure / OT
    eta_ema: float = 0.3
    epsilon_ot: float = 0.05
    sinkhorn_max_iter: int = 1000
    sinkhorn_tol: float = 1e-6
    # schedules
    eta0: float = 0.01
    gamma: float = 10.0
    beta: float = 0.75
    alpha: float = 10.0
    momentum: float = 0.9
    task_lr_mult: float = 10.0
    temperature: float = 0.85
    burn_in: float = 0.0
    entropy_sign: float = 1.0
    # model
    hidden: tuple[int, ...] = (64, 64)
    bottleneck: int = 16
    # loop
    batch_size: int = 64
    max_iters: int = 5000
    seed: int = 0
    # ablations
    no_angular: bool = False
    no_stiefel: bool = False
    no_consensus: bool = False
    no_ot: bool = False

    def __post_init__(self):
        validate_train(self)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


_NONNEG = ("lambda_T", "lambda_phi", "lambda_ot", "lambda_R", "lambda_dist", "eta0", "gamma", "beta", "alpha")


def validate_train(cfg: TrainConfig) -> None:
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, float) and not math.isfinite(v):
            raise ConfigError(f.name, "must be finite")
    for name in _NONNEG:
        if getattr(cfg, name) < 0:
            raise ConfigError(name, "must be nonnegative")
    if not 0.0 <= cfg.eta_ema <= 1.0:
        raise ConfigError("eta_ema", "must lie in [0, 1]")
    if not cfg.epsilon_ot > 0:
        raise ConfigError("epsilon_ot", "must be positive")
    if not cfg.temperature > 0:
        raise ConfigError("temperature", "must be positive")
    if not 0.0 <= cfg.burn_in < 1.0:
        raise ConfigError("burn_in", "must lie in [0, 1)")
    if not 0.0 <= cfg.momentum < 1.0:
        raise ConfigError("momentum", "must lie in [0, 1)")
    if cfg.entropy_sign not in (-1.0, 1.0):
        raise ConfigError("entropy_sign", "must be +1 or -1")
    if cfg.batch_size < 1:
        raise ConfigError("batch_size", "must be >= 1")
    if cfg.max_iters < 0:
        raise ConfigError("max_iters", "must be >= 0")
    if cfg.bottleneck < 1 or any(h < 1 for h in cfg.hidden):
        raise ConfigError("hidden", "layer widths must be >= 1")
    if cfg.sinkhorn_max_iter < 1:
        raise ConfigError("sinkhorn_max_iter", "must be >= 1")


@dataclass(frozen=True)
class DataConfig:
    dataset: str = "blobs"  # blobs | moons | idx
    num_classes: int = 5
    n: int = 2000
    dim: int = 2
    spread: float = 0.35
    center_radius: float = 3.0
    min_separation: float = 2.5
    rotation_deg: float = 30.0
    translation: tuple[float, ...] = (2.0, 0.0)
    target_priors: tuple[float, ...] | None = None
    target_noise: float = 0.0
    moons_noise: float = 0.1
    data_seed: int = 0
    source_images: str | None = None
    source_labels: str | None = None
    target_images: str | None = None
    target_labels: str | None = None

    def __post_init__(self):
        if self.dataset not in ("blobs", "moons", "idx"):
            raise ConfigError("dataset", f"unknown dataset kind {self.dataset!r}")
        if self.dataset == "idx":
            for name in ("source_images", "source_labels", "target_images", "target_labels"):
                if not getattr(self, name):
                    raise ConfigError(name, "required for dataset 'idx'")
        if self.n < 2:
            raise ConfigError("n", "must be >= 2")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["translation"] = list(self.translation)
        if self.target_priors is not None:
            d["target_priors"] = list(self.target_priors)
        return d


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    output_dir: str = "runs/default"
    log_interval: int = 50
    eval_only: bool = False
    preset: str | None = None

    def __post_init__(self):
        if self.log_interval < 1:
            raise ConfigError("log_interval", "must be >= 1")

    def to_dict(self) -> dict:
        out = {"preset": self.preset, "output_dir": self.output_dir, "log_interval": self.log_interval,
               "eval_only": self.eval_only}
        out.update(self.train.to_dict())
        out.update(self.data.to_dict())
        return out


_TRAIN_KEYS = {f.name: f for f in fields(TrainConfig)}
_DATA_KEYS = {f.name: f for f in fields(DataConfig)}
_RUN_KEYS = {"output_dir", "log_interval", "eval_only", "preset"}

_TUPLE_KEYS = {"hidden", "translation", "target_priors"}


def _coerce(name: str, value, default):
    if name in _TUPLE_KEYS:
        if value is None:
            return None
        if not isinstance(value, (list, tuple)):
            raise ConfigError(name, "must be a list")
        return tuple(value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(name, "must be true or false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise ConfigError(name, "must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(name, "must be a number")
        return float(value)
    if default is None or isinstance(default, str):
        if value is not None and not isinstance(value, str):
            raise ConfigError(name, "must be a string")
        return value
    return value


# ------------------------------------------------------------------ presets

SOURCE_ONLY = {"lambda_T": 0.0, "lambda_phi": 0.0, "lambda_ot": 0.0, "lambda_R": 0.0}

PRESETS: dict[str, dict] = {
    "drda-default": {},
    "drda-sensitivity": {"lambda_T": 150.0, "lambda_phi": 3.0, "lambda_R": 20.0},
    "source-only": dict(SOURCE_ONLY),
    "wo-angular": {"no_angular": True},
    "wo-stiefel": {"no_stiefel": True},
    "wo-consensus": {"no_consensus": True},
    "wo-ot": {"no_ot": True},
    "burn-in-25": {"burn_in": 0.25},
    "burn-in-50": {"burn_in": 0.5},
    "burn-in-75": {"burn_in": 0.75},
    "entropy-min": {"entropy_sign": -1.0},
    "fig3-2d": {"bottleneck": 2},
    "synthetic-desk": {"lambda_T": 0.1, "lambda_phi": 1.0, "lambda_R": 0.2, "lambda_ot": 0.05, "lambda_dist": 0.1,
                       "eta_ema": 0.7, "alpha": 3.0, "epsilon_ot": 0.05, "max_iters": 1000},
}

SENSITIVITY_GRIDS: dict[str, tuple[str, tuple[float, ...]]] = {
    "sens-lambdaT-grid": ("lambda_T", (0.0, 50.0, 100.0, 150.0, 200.0, 300.0)),
    "sens-lambdaOT-grid": ("lambda_ot", (0.0, 0.0001, 0.0005, 0.001, 0.005, 0.01)),
    "sens-lambdaPhi-grid": ("lambda_phi", (0.0, 0.3, 0.6, 1.0, 3.0, 6.0)),
    "sens-lambdaR-grid": ("lambda_R", (0.0, 0.5, 1.0, 5.0, 10.0, 20.0)),
}


def grid_configs(name: str, base: "RunConfig") -> list[tuple[str, "RunConfig"]]:
    if name not in SENSITIVITY_GRIDS:
        raise ConfigError("preset", f"unknown sensitivity grid {name!r}")
    key, values = SENSITIVITY_GRIDS[name]
    out = []
    for v in values:
        tag = f"{key}={v:g}"
        train = replace(base.train, **{key: v})
        out.append((tag, replace(base, train=train, output_dir=f"{base.output_dir}/{tag}")))
    return out


def run_config_from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    unknown = sorted(set(raw) - set(_TRAIN_KEYS) - set(_DATA_KEYS) - _RUN_KEYS)
    if unknown:
        raise ConfigError(unknown[0], "unknown configuration key")
    merged = dict(raw)
    preset = merged.get("preset")
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError("preset", f"unknown preset {preset!r}; known: {sorted(PRESETS)}")
        merged = {**PRESETS[preset], **raw}
    train_kw, data_kw, run_kw = {}, {}, {}
    defaults_t, defaults_d = TrainConfig.__dataclass_fields__, DataConfig.__dataclass_fields__
    for key, value in merged.items():
        if key in _TRAIN_KEYS:
            train_kw[key] = _coerce(key, value, defaults_t[key].default)
        elif key in _DATA_KEYS:
            data_kw[key] = _coerce(key, value, defaults_d[key].default)
        else:
            run_kw[key] = value
    if "log_interval" in run_kw:
        run_kw["log_interval"] = _coerce("log_interval", run_kw["log_interval"], 1)
    if "eval_only" in run_kw:
        run_kw["eval_only"] = _coerce("eval_only", run_kw["eval_only"], False)
    if "output_dir" in run_kw:
        run_kw["output_dir"] = _coerce("output_dir", run_kw["output_dir"], "")
    return RunConfig(train=TrainConfig(**train_kw), data=DataConfig(**data_kw), **run_kw)


def load_run_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"invalid JSON: {exc}") from exc
    except OSError as exc:
        raise ConfigError("<file>", str(exc)) from exc
    return run_config_from_dict(raw)


def train_config_from_dict(raw: dict) -> TrainConfig:
    unknown = sorted(set(raw) - set(_TRAIN_KEYS))
    if unknown:
        raise ConfigError(unknown[0], "unknown training key")
    defaults = TrainConfig.__dataclass_fields__
    return TrainConfig(**{k: _coerce(k, v, defaults[k].default) for k, v in raw.items()})
