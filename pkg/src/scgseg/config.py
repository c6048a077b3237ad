"""Run configuration: YAML file, CLI overrides, defaults (in that precedence)."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError
from .losses import LossConfig
from .model import ModelConfig

DEFAULT_TRAIN_FRACTION = 268 / 318


@dataclass
class DataConfig:
    image_dir: str | None = None
    mask_dir: str | None = None
    manifest: str | None = None
    synthetic: bool = False
    synthetic_count: int = 8
    synthetic_test_count: int = 0
    train_fraction: float = DEFAULT_TRAIN_FRACTION


@dataclass
class TrainConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    batch_size: int = 4
    epochs: int = 250
    max_steps: int | None = None
    learning_rate: float = 1e-4
    seed: int = 0
    checkpoint_dir: str = "checkpoints"
    deterministic: bool = False
    device: str = "cpu"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.max_steps is not None and self.max_steps < 0:
            raise ConfigError(f"max_steps must be >= 0, got {self.max_steps}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.device not in ("cpu", "gpu"):
            raise ConfigError(f"device must be 'cpu' or 'gpu', got {self.device!r}")
        d = self.data
        if not 0.0 < d.train_fraction <= 1.0:
            raise ConfigError(f"train_fraction must lie in (0, 1], got {d.train_fraction}")

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["model"] = self.model.to_dict()
        return out


_SECTIONS = {"data": DataConfig, "model": ModelConfig, "loss": LossConfig}


def _build(cls, values: dict, where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(sorted(unknown))}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(raw: dict[str, Any]) -> TrainConfig:
    raw = dict(raw or {})
    kwargs = {}
    for name, cls in _SECTIONS.items():
        section = raw.pop(name, None) or {}
        if not isinstance(section, dict):
            raise ConfigError(f"section {name!r} must be a mapping")
        kwargs[name] = _build(cls, section, name)
    top = _build(TrainConfig, {**raw, **kwargs}, "top level")
    return top


def load_config(path=None, overrides: dict[str, Any] | None = None) -> TrainConfig:
    """Read a YAML config and apply dotted-key overrides (``model.latent_dim``)."""
    raw: dict[str, Any] = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise OSError(f"cannot read config {path}: {exc}") from exc
        try:
            raw = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        node = raw
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    return config_from_dict(raw)


def dump_config(config: TrainConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(config.to_dict(), sort_keys=False), encoding="utf-8")
