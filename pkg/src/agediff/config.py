"""Run configuration: one strict JSON document, every field defaulted."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import get_type_hints

from agediff.backbone.toy import ToyTrainConfig
from agediff.edit import EditConfig
from agediff.errors import ConfigError, AgeDiffError
from agediff.invert import NullOptConfig
from agediff.metrics import EvalConfig
from agediff.schedule import NoiseSchedule
from agediff.specialize import SpecializationConfig


@dataclass
class ScheduleConfig:
    total_train_steps: int = 1000
    beta_min: float = 0.00085
    beta_max: float = 0.012
    kind: str = "scaled_linear"
    inference_steps: int = 50

    def build(self) -> NoiseSchedule:
        return NoiseSchedule(self.total_train_steps, self.beta_min, self.beta_max, self.kind)


@dataclass
class DatasetConfig:
    num_samples: int = 150
    image_size: int = 32
    seed: int = 7


@dataclass
class PretrainDatasetConfig:
    """Broad-domain data for the toy backbone's generic training."""

    num_samples: int = 2000
    seed: int = 1
    color_jitter: float = 0.25


@dataclass
class InvertConfig:
    inner_iterations: int = 10
    learning_rate: float = 1e-2
    early_stop: float = 1e-5
    guidance_w: float = 7.5
    inversion_w: float = 1.0

    def null_config(self) -> NullOptConfig:
        return NullOptConfig(self.inner_iterations, self.learning_rate, self.early_stop, self.guidance_w)


@dataclass
class AdapterConfig:
    age_estimator: str = "toy-oracle"
    gender: str = "toy-oracle"
    smile: str = "toy-oracle"
    expression: str = "toy-oracle"


@dataclass
class EditRunConfig:
    """Batch edit section of the pipeline command."""

    num_images: int = 20
    source_age_range: tuple = (25, 35)
    targets: tuple = (80, 5)
    image_seed: int = 4242


@dataclass
class RunConfig:
    seed: int = 0
    backbone: str = ""
    out: str = "runs/default"
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    pretrain_dataset: PretrainDatasetConfig = field(default_factory=PretrainDatasetConfig)
    toy_train: ToyTrainConfig = field(default_factory=ToyTrainConfig)
    specialize: SpecializationConfig = field(default_factory=SpecializationConfig)
    invert: InvertConfig = field(default_factory=InvertConfig)
    edit: EditConfig = field(default_factory=EditConfig)
    edit_run: EditRunConfig = field(default_factory=EditRunConfig)
    eval: EvalConfig = field(default_factory=lambda: EvalConfig(subset_size=10, num_subsets=20))
    adapters: AdapterConfig = field(default_factory=AdapterConfig)


def from_dict(cls, data: dict, path: str = ""):
    """Build dataclass ``cls`` from ``data``; unknown keys raise ConfigError."""
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(data).__name__}")
    hints = get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(path + k for k in unknown)}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        hint = hints[f.name]
        if dataclasses.is_dataclass(hint):
            value = from_dict(hint, value, f"{path}{f.name}.")
        elif isinstance(value, list) and f.name in ("source_age_range", "targets"):
            value = tuple(value)
        kwargs[f.name] = value
    try:
        return cls(**kwargs)
    except AgeDiffError as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc
    except TypeError as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def to_dict(cfg) -> dict:
    return json.loads(json.dumps(dataclasses.asdict(cfg)))


def load_config(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    return from_dict(RunConfig, data)


def override(cfg, section: str, **values):
    """Return ``cfg`` with non-None ``values`` replaced inside ``section``."""
    values = {k: v for k, v in values.items() if v is not None}
    if not values:
        return cfg
    target = getattr(cfg, section) if section else cfg
    merged = from_dict(type(target), {**to_dict(target), **values}, f"{section}.")
    if not section:
        return merged
    return dataclasses.replace(cfg, **{section: merged})


def toy_quick_config(**kw) -> dict:
    """A small configuration for smoke runs and determinism checks."""
    base = {
        "pretrain_dataset": {"num_samples": 64},
        "dataset": {"num_samples": 8},
        "toy_train": {"steps": 20, "batch_size": 8},
        "specialize": {"steps": 4},
        "invert": {"inner_iterations": 2},
        "schedule": {"inference_steps": 10},
        "edit_run": {"num_images": 2, "targets": [80]},
        "eval": {"subset_size": 2, "num_subsets": 3},
    }
    base.update(kw)
    return base

