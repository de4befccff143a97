"""Run configuration: one JSON file, validated section by section."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import InvalidConfig
from .model import LossWeights, NetworkConfig
from .preprocess import AugmentRanges
from .synth import SynthConfig
from .targets import MaskConfig, SmoothingConfig
from .train import TrainConfig

_TRAIN_SCALARS = tuple(
    f.name
    for f in dataclasses.fields(TrainConfig)
    if f.name not in ("mask", "smoothing", "loss_weights", "augment_ranges", "seed")
)


@dataclass(frozen=True)
class PathsConfig:
    data_dir: str = "data"
    out_dir: str = "out"
    manifest: str | None = None


@dataclass(frozen=True)
class RunConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    smoothing: SmoothingConfig = field(default_factory=SmoothingConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    augment: AugmentRanges = field(default_factory=AugmentRanges)
    paths: PathsConfig = field(default_factory=PathsConfig)
    seed: int = 0

    def train_config(self, **overrides) -> TrainConfig:
        cfg = dataclasses.replace(
            self.train,
            mask=self.mask,
            smoothing=self.smoothing,
            loss_weights=self.loss_weights,
            augment_ranges=self.augment,
            seed=self.seed,
        )
        return dataclasses.replace(cfg, **overrides) if overrides else cfg

    def to_dict(self) -> dict:
        train = {k: getattr(self.train, k) for k in _TRAIN_SCALARS}
        return {
            "seed": self.seed,
            "synth": dataclasses.asdict(self.synth),
            "mask": dataclasses.asdict(self.mask),
            "smoothing": dataclasses.asdict(self.smoothing),
            "network": dataclasses.asdict(self.network),
            "train": train,
            "loss_weights": dataclasses.asdict(self.loss_weights),
            "augment": dataclasses.asdict(self.augment),
            "paths": dataclasses.asdict(self.paths),
        }


_SECTIONS = {
    "synth": SynthConfig,
    "mask": MaskConfig,
    "smoothing": SmoothingConfig,
    "network": NetworkConfig,
    "loss_weights": LossWeights,
    "augment": AugmentRanges,
    "paths": PathsConfig,
}


def _build(cls, values: dict, section: str, allowed=None):
    if not isinstance(values, dict):
        raise InvalidConfig(f"section {section!r} must be an object")
    names = set(allowed) if allowed is not None else {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise InvalidConfig(f"unknown keys in {section!r}: {sorted(unknown)}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise InvalidConfig(f"section {section!r}: {exc}") from exc


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise InvalidConfig("config must be a JSON object")
    unknown = set(data) - set(_SECTIONS) - {"train", "seed"}
    if unknown:
        raise InvalidConfig(f"unknown config sections: {sorted(unknown)}")
    parts = {name: _build(cls, data[name], name) for name, cls in _SECTIONS.items() if name in data}
    if "train" in data:
        parts["train"] = _build(TrainConfig, data["train"], "train", _TRAIN_SCALARS)
    if "seed" in data:
        if not isinstance(data["seed"], int):
            raise InvalidConfig("seed must be an integer")
        parts["seed"] = data["seed"]
    return RunConfig(**parts)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise InvalidConfig(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InvalidConfig(f"config {path} is not valid JSON: {exc}") from exc
    return config_from_dict(data)


def defaults_json() -> str:
    return json.dumps(RunConfig().to_dict(), indent=2, sort_keys=True)
