"""Run configuration: YAML key/value file, validated, with CLI overrides.

Unknown keys are rejected; every run echoes its effective configuration into
the output directory so results are reproducible from that directory alone.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import yaml

from .archspace import SpaceConstraints
from .network import NetConfig
from .traineval import TrainParams


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # dataset
    data_dir: str = "data"
    n_samples: int = 400
    noise_amplitude: float = 0.04
    folds: int = 10
    test_fold: int = 0
    val_fold: int = 1
    train_folds: int = 4
    # search space
    widths: tuple[int, ...] = (4, 8)
    min_total_depth: int = 3
    max_total_depth: int = 4
    # search loop
    budget: int = 20
    patience: int = 5
    search_epochs: int = 10
    latency_reps: int = 5
    latency_warmup: int = 2
    # training
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    epochs: int = 30
    batch_size: int = 8
    seed: int = 0
    # network / loss
    cbam: bool = True
    cbam_order: str = "channel-first"
    loss: str = "asoftmax"
    m: int = 4
    lam0: float = 1000.0
    lam_min: float = 5.0
    lam_decay: float = 0.12
    # ensemble
    threshold: float = 0.5

    def validate(self) -> "RunConfig":
        checks = [
            ("n_samples", self.n_samples >= 2),
            ("folds", self.folds >= 2),
            ("test_fold", 0 <= self.test_fold < self.folds),
            ("val_fold", 0 <= self.val_fold < self.folds),
            ("train_folds", 1 <= self.train_folds <= self.folds - 2),
            ("budget", self.budget >= 0),
            ("patience", self.patience >= 1),
            ("search_epochs", self.search_epochs >= 0),
            ("lr", self.lr > 0),
            ("beta1", 0 <= self.beta1 < 1),
            ("beta2", 0 <= self.beta2 < 1),
            ("epochs", self.epochs >= 0),
            ("batch_size", self.batch_size >= 1),
            ("m", self.m >= 1 and int(self.m) == self.m),
            ("lam0", self.lam0 > 0),
            ("lam_min", self.lam_min >= 0),
            ("lam_decay", self.lam_decay >= 0),
            ("threshold", 0 < self.threshold < 1),
            ("noise_amplitude", self.noise_amplitude >= 0),
            ("loss", self.loss in ("softmax", "asoftmax")),
            ("cbam_order", self.cbam_order in ("channel-first", "spatial-first")),
            ("latency_reps", self.latency_reps >= 1),
        ]
        for name, ok in checks:
            if not ok:
                raise ConfigError(f"invalid value for {name!r}: {getattr(self, name)!r}")
        # SpaceConstraints re-validates widths and depth range
        try:
            self.constraints()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def constraints(self) -> SpaceConstraints:
        return SpaceConstraints(widths=tuple(self.widths),
                                min_total=self.min_total_depth,
                                max_total=self.max_total_depth)

    def net_config(self) -> NetConfig:
        return NetConfig(cbam_enabled=self.cbam, cbam_order=self.cbam_order,
                         loss_kind=self.loss, margin=int(self.m),
                         lam0=self.lam0, lam_min=self.lam_min, lam_decay=self.lam_decay)

    def train_params(self) -> TrainParams:
        return TrainParams(lr=self.lr, beta1=self.beta1, beta2=self.beta2,
                           batch_size=self.batch_size)


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(name: str, value):
    if name == "widths":
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"invalid value for 'widths': {value!r}")
        return tuple(int(v) for v in value)
    return value


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Config file values underneath command-line overrides; empty file is all defaults."""
    values: dict = {}
    if path is not None:
        try:
            with open(path) as fh:
                raw = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from exc
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            raise ConfigError(f"config {path} must be a key/value mapping")
        values.update(raw)
    for key, val in (overrides or {}).items():
        if val is not None:
            values[key] = val
    unknown = set(values) - set(_FIELDS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cfg = RunConfig(**{k: _coerce(k, v) for k, v in values.items()})
    return cfg.validate()


def echo_config(cfg: RunConfig, out_dir):
    """Write the effective configuration next to a run's outputs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data = asdict(cfg)
    data["widths"] = list(data["widths"])
    with open(out_dir / "effective_config.yaml", "w") as fh:
        yaml.safe_dump(data, fh, sort_keys=True)
