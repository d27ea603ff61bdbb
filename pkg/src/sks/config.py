"""Strict JSON configuration: every field explicit, unknown fields rejected."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

from .data import SyntheticConfig
from .encoder import ModelConfig
from .fusion import AblationFlags, ConfigError

STAGES = ("coarse", "seg")


@dataclass
class OptimConfig:
    lr: float = 1e-3
    momentum: float = 0.9
    steps: int = 1000
    batch: int = 4


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    stage: str = "coarse"
    optim: OptimConfig = field(default_factory=OptimConfig)
    seed: int = 0
    ablation: AblationFlags = field(default_factory=AblationFlags)
    dataset: str = "dataset"
    train_split: str = "train"
    eval_split: str = "val"
    eval_interval: int = 100
    precision: str = "f32"
    checkpoint: str = "checkpoint.skpt"
    coarse_checkpoint: str | None = None
    log: str | None = None

    def validate(self) -> None:
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"precision must be 'f32' or 'f64', got {self.precision!r}")
        if self.optim.steps < 0 or self.optim.batch < 1 or self.optim.lr < 0:
            raise ConfigError(f"invalid optimizer settings {self.optim}")
        if self.eval_interval < 1:
            raise ConfigError("eval_interval must be positive")
        self.model.validate()

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


_NESTED = {"model": ModelConfig, "optim": OptimConfig, "ablation": AblationFlags}


def _build(cls, data: Any, where: str, nested: dict[str, type] | None = None):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    names = [f.name for f in dataclasses.fields(cls)]
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {unknown}")
    missing = [n for n in names if n not in data]
    if missing:
        raise ConfigError(f"{where}: missing field(s) {missing}")
    kwargs = {}
    for n in names:
        value = data[n]
        if nested and n in nested:
            value = _build(nested[n], value, f"{where}.{n}")
        kwargs[n] = value
    return cls(**kwargs)


def train_config_from_dict(data: dict) -> TrainConfig:
    cfg = _build(TrainConfig, data, "config", _NESTED)
    cfg.validate()
    return cfg


def synthetic_config_from_dict(data: dict) -> SyntheticConfig:
    cfg = _build(SyntheticConfig, data, "synthetic config")
    cfg.validate()
    return cfg


def load_train_config(path) -> TrainConfig:
    return train_config_from_dict(json.loads(Path(path).read_text()))


def load_synthetic_config(path) -> SyntheticConfig:
    return synthetic_config_from_dict(json.loads(Path(path).read_text()))


def dump_config(cfg, path) -> None:
    Path(path).write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n")
