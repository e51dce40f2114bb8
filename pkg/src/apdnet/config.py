"""Experiment configuration: one YAML file carrying every hyperparameter, with
the trained values as defaults, plus stable config hashing for reproducibility."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from typing import Any, Dict, get_origin, get_type_hints

import yaml

from .losses import LossWeights
from .networks import NetworkConfig
from .phantom import PhantomConfig
from .training import ScenarioWeights, TrainingConfig


@dataclass
class ExperimentConfig:
    training: TrainingConfig = field(default_factory=TrainingConfig)
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    test_fraction: float = 0.2

    def __post_init__(self) -> None:
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError("test_fraction must lie in (0, 1)")


def dataclass_from_mapping(cls, data: Dict[str, Any]):
    """Build a dataclass from a plain dict, recursing into nested dataclasses
    and restoring tuples from YAML lists."""
    hints = get_type_hints(cls)
    kwargs: Dict[str, Any] = {}
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    for f in fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        hint = hints[f.name]
        if is_dataclass(hint) and isinstance(value, dict):
            value = dataclass_from_mapping(hint, value)
        elif get_origin(hint) is tuple and isinstance(value, (list, tuple)):
            value = tuple(value)
        kwargs[f.name] = value
    return cls(**kwargs)


def load_config(path) -> ExperimentConfig:
    with open(path) as f:
        data = yaml.safe_load(f) or {}
    return dataclass_from_mapping(ExperimentConfig, data)


def save_config(config: ExperimentConfig, path) -> None:
    with open(path, "w") as f:
        yaml.safe_dump(asdict(config), f, sort_keys=False)


def config_hash(payload: Any) -> str:
    """Stable short hash of any dataclass / dict / scalar structure."""
    if is_dataclass(payload) and not isinstance(payload, type):
        payload = asdict(payload)
    canonical = json.dumps(payload, sort_keys=True, default=str)
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


__all__ = [
    "ExperimentConfig", "LossWeights", "NetworkConfig", "PhantomConfig",
    "ScenarioWeights", "TrainingConfig", "config_hash", "load_config",
    "save_config",
]
