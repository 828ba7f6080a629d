"""Run configuration: one JSON-serializable dataclass for the whole CLI."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .model import ModelConfig

NORMALIZATION_METHODS = ("reinhard", "macenko", "vahadane", "model")


class ConfigError(ValueError):
    """Configuration file or override is invalid."""


@dataclass
class TrainConfig:
    learning_rate: float = 1.5e-4
    beta1: float = 0.9
    beta2: float = 0.95
    epsilon: float = 1e-8
    weight_decay: float = 0.01
    steps: int = 500
    log_every: int = 10


@dataclass
class RunConfig:
    input_dir: str = ""
    output_dir: str = "out"
    template: str = "auto"
    method: str = "model"
    checkpoint: str = ""
    domain_a_dir: str = ""
    domain_b_dir: str = ""
    reference_dir: str = ""
    histogram_bins: int = 256
    tile_size: int = 256
    edge_policy: str = "retain"
    seed: int = 0
    threads: int = 1
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.method not in NORMALIZATION_METHODS:
            raise ConfigError(f"method must be one of {NORMALIZATION_METHODS}, got {self.method!r}")
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")
        if self.histogram_bins < 2 or 256 % self.histogram_bins:
            raise ConfigError(f"histogram_bins must divide 256, got {self.histogram_bins}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "model" in d and isinstance(d["model"], dict):
            try:
                d["model"] = ModelConfig.from_dict(d["model"])
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
        if "train" in d and isinstance(d["train"], dict):
            extra = set(d["train"]) - {f.name for f in fields(TrainConfig)}
            if extra:
                raise ConfigError(f"unknown train config keys: {sorted(extra)}")
            d["train"] = TrainConfig(**d["train"])
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


def load_run_config(path: str | Path) -> RunConfig:
    with open(path) as fp:
        try:
            data = json.load(fp)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top-level JSON value must be an object")
    return RunConfig.from_dict(data)


def save_run_config(cfg: RunConfig, path: str | Path) -> None:
    with open(path, "w") as fp:
        json.dump(cfg.to_dict(), fp, indent=2, sort_keys=True)
        fp.write("\n")
