"""Run configuration: dotted keys mirroring :class:`ModelConfig` and :class:`TrainConfig`.

A config file is YAML; keys may be nested (``model: {time_steps: 8}``) or dotted
(``model.time_steps: 8``). Unknown keys are rejected.
"""

from __future__ import annotations

from dataclasses import fields
from pathlib import Path
from typing import Any, Optional, Union

import yaml

from .model import ModelConfig
from .training import TrainConfig

__all__ = ["ConfigError", "default_config", "load_config", "model_config", "train_config", "dump_config"]


class ConfigError(ValueError):
    """Invalid or incomplete configuration."""


_TRAIN_MASK_KEYS = {"mask_type": "mask.type", "center_radius": "mask.center_radius", "acs_fraction": "mask.acs_fraction"}


def default_config() -> dict[str, Any]:
    """Flat dotted-key defaults."""
    config: dict[str, Any] = {
        "seed": None,
        "data.root": "data",
        "data.shape": [64, 64],
        "data.n_coils": 4,
        "data.slices_per_volume": 4,
        "data.n_train": 4,
        "data.n_val": 1,
        "data.n_test": 1,
        "data.sigma": 0.0,
        "mask.type": "variable-density",
        "mask.center_radius": 0.12,
        "mask.acs_fraction": None,
    }
    for f in fields(ModelConfig):
        value = getattr(ModelConfig(), f.name)
        config[f"model.{f.name}"] = list(value) if isinstance(value, tuple) else value
    train_defaults = TrainConfig()
    for f in fields(TrainConfig):
        if f.name in _TRAIN_MASK_KEYS or f.name == "seed":
            continue
        value = getattr(train_defaults, f.name)
        config[f"train.{f.name}"] = list(value) if isinstance(value, tuple) else value
    return config


def _flatten(tree: dict, prefix: str = "") -> dict[str, Any]:
    flat = {}
    for key, value in tree.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(_flatten(value, name + "."))
        else:
            flat[name] = value
    return flat


def _check_keys(config: dict, valid: dict) -> None:
    unknown = sorted(set(config) - set(valid))
    if unknown:
        raise ConfigError(f"Unknown config key(s): {', '.join(unknown)}. Valid keys: {', '.join(sorted(valid))}.")


def load_config(path: Optional[Union[str, Path]] = None, overrides: Optional[dict] = None) -> dict[str, Any]:
    """Defaults, updated by the file at ``path`` and then by ``overrides`` (dotted keys)."""
    config = default_config()
    if path is not None:
        try:
            tree = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"Cannot read config {path}: {exc}") from exc
        if not isinstance(tree, dict):
            raise ConfigError(f"Config {path} must be a mapping.")
        flat = _flatten(tree)
        _check_keys(flat, config)
        config.update(flat)
    if overrides:
        _check_keys(overrides, config)
        config.update({k: v for k, v in overrides.items() if v is not None})
    if config["seed"] is None:
        raise ConfigError("A seed is required: set 'seed' in the config file or pass --seed.")
    return config


def parse_override(text: str) -> tuple[str, Any]:
    """Parse ``key=value`` with a YAML-typed value."""
    if "=" not in text:
        raise ConfigError(f"Override {text!r} must have the form key=value.")
    key, value = text.split("=", 1)
    return key.strip(), yaml.safe_load(value)


def model_config(config: dict) -> ModelConfig:
    try:
        return ModelConfig(**{k[len("model.") :]: v for k, v in config.items() if k.startswith("model.")})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def train_config(config: dict) -> TrainConfig:
    kwargs = {k[len("train.") :]: v for k, v in config.items() if k.startswith("train.")}
    kwargs.update({name: config[key] for name, key in _TRAIN_MASK_KEYS.items()})
    kwargs["seed"] = int(config["seed"])
    try:
        return TrainConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def dump_config(config: dict) -> str:
    return yaml.safe_dump(dict(sorted(config.items())), sort_keys=False, default_flow_style=None)
