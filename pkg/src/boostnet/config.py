"""Run configuration: a flat, versioned TOML file.

Every key has a default; unknown keys and wrongly typed values are errors so
that typos do not silently fall back to defaults.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

import numpy as np

from boostnet.data import DATASETS, Split, load_dataset, split_dataset
from boostnet.model import ConfigError, ModelConfig, make_config
from boostnet.trainer import TrainingConfig

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    # data
    dataset: str = "two-moons"
    n_samples: int = 2000
    noise: float = 0.25
    n_classes: int = 3
    n_features: int = 2
    data_path: str = ""
    holdout_fraction: float = 0.2
    test_fraction: float = 0.2
    # model
    backbone: str = "multi-exit-mlp"
    widths: list = field(default_factory=lambda: [16, 16, 16, 16])
    strides: list = field(default_factory=list)
    activation: str = "tanh"
    temperature: object = 0.5
    loss_weight: object = 1.0
    gradient_rescaling: bool = True
    stop_gradient: bool = True
    # training
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 0.1
    momentum: float = 0.9
    decay_milestones: list = field(default_factory=lambda: [15, 22])
    decay_factor: float = 0.1
    weight_decay: float = 0.0
    checkpoint_every: int = 0
    # evaluation
    budget_points: int = 8
    # run
    seed: int = 0
    output_dir: str = "runs/default"

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(
                f"unsupported schema_version {self.schema_version} (expected {SCHEMA_VERSION})"
            )
        if self.dataset not in DATASETS:
            raise ConfigError(f"unknown dataset {self.dataset!r}; choose from {DATASETS}")
        if not 0 < self.holdout_fraction <= 0.5:
            raise ConfigError("holdout_fraction must be in (0, 0.5]")
        if not 0 < self.test_fraction < 1 - self.holdout_fraction:
            raise ConfigError("test_fraction must leave room for training data")
        if self.dataset == "external-directory" and not self.data_path:
            raise ConfigError("external-directory needs data_path")
        if self.budget_points < 1:
            raise ConfigError("budget_points must be >= 1")
        # surface training-config errors at load time
        self.training_config()

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(raw) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        defaults = cls.__new__(cls)
        for f in fields(cls):
            default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
            object.__setattr__(defaults, f.name, default)
        for key, value in raw.items():
            _check_type(key, value, getattr(defaults, key))
        try:
            return cls(**raw)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
        return cls.from_dict(raw)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_toml(self) -> str:
        lines = []
        for key, value in self.to_dict().items():
            lines.append(f"{key} = {_toml_value(value)}")
        return "\n".join(lines) + "\n"

    # -- derived objects --

    def training_config(self) -> TrainingConfig:
        try:
            return TrainingConfig(
                epochs=self.epochs,
                batch_size=self.batch_size,
                learning_rate=self.learning_rate,
                momentum=self.momentum,
                decay_milestones=tuple(self.decay_milestones),
                decay_factor=self.decay_factor,
                weight_decay=self.weight_decay,
                seed=self.seed,
                checkpoint_every=self.checkpoint_every,
            )
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def load_data(self) -> tuple[np.ndarray, np.ndarray]:
        layout = "chw" if self.backbone == "multi-exit-cnn" else "flat"
        x, y = load_dataset(
            self.dataset,
            seed=self.seed,
            n_samples=self.n_samples,
            noise=self.noise,
            n_classes=self.n_classes,
            n_features=self.n_features,
            image_layout=layout,
            path=self.data_path or None,
        )
        if self.backbone == "multi-exit-cnn" and x.ndim != 4:
            raise ConfigError("multi-exit-cnn needs image data (small-image-grid or 4-d external)")
        return x, y

    def splits(self) -> dict[str, Split]:
        x, y = self.load_data()
        return split_dataset(x, y, self.holdout_fraction, self.test_fraction, self.seed)

    def model_config(self, input_shape, num_classes: int) -> ModelConfig:
        return make_config(
            self.backbone,
            tuple(int(s) for s in input_shape),
            tuple(self.widths),
            int(num_classes),
            temperature=self.temperature,
            loss_weight=self.loss_weight,
            gradient_rescaling_enabled=self.gradient_rescaling,
            stop_gradient_enabled=self.stop_gradient,
            activation=self.activation,
            strides=tuple(self.strides) if self.strides else None,
        )


def _check_type(key, value, default):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        if key in ("temperature", "loss_weight"):
            ok = ok or (isinstance(value, list) and all(isinstance(v, (int, float)) for v in value))
    elif isinstance(default, list):
        ok = isinstance(value, list)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"config key {key!r}: unexpected value {value!r}")


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot encode {v!r} as TOML")


def write_config(path, cfg: RunConfig) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(cfg.to_toml())
