"""Run configuration files.

A YAML mapping with ``model``, ``train``, ``eval`` and ``data`` sections
(nested or as dotted keys). Unknown keys are rejected and every value is
validated before any compute starts::

    model:
      feature_channels: 32
      dtype: float32
    train.iterations: 3000
    train.lr_steps: [2000]
"""

from dataclasses import dataclass, field, fields

import yaml

from .evaluate import EvalConfig
from .model import ModelConfig
from .train import TrainConfig

__all__ = ["ConfigError", "DataConfig", "RunConfig", "load_run_config", "parse_run_config"]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    max_clips: int = 0  # 0 = use every clip

    def __post_init__(self):
        if self.max_clips < 0:
            raise ValueError("max_clips must be >= 0")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    data: DataConfig = field(default_factory=DataConfig)


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "eval": EvalConfig, "data": DataConfig}


def _flatten(mapping, prefix=""):
    out = {}
    for k, v in mapping.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _coerce(value, default, key):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list")
        return tuple(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string")
        return value
    return value


def parse_run_config(mapping):
    if mapping is None:
        mapping = {}
    if not isinstance(mapping, dict):
        raise ConfigError("config must be a mapping")
    flat = _flatten(mapping)
    grouped = {name: {} for name in _SECTIONS}
    for key, value in flat.items():
        section, _, name = key.partition(".")
        if section not in _SECTIONS or not name or "." in name:
            raise ConfigError(f"unknown config key {key!r}")
        cls = _SECTIONS[section]
        defaults = {f.name: getattr(cls(), f.name) for f in fields(cls)}
        if name not in defaults:
            raise ConfigError(f"unknown config key {key!r}")
        grouped[section][name] = _coerce(value, defaults[name], key)
    try:
        return RunConfig(**{s: _SECTIONS[s](**kw) for s, kw in grouped.items()})
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def load_run_config(path):
    try:
        with open(path) as fh:
            mapping = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return parse_run_config(mapping)
