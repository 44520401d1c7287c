"""Flat JSON configuration files and their merge with command-line overrides.

A config file is a single JSON object whose keys are :class:`TrainConfig`
fields, for example::

    {"steps": 2000, "width": 128, "augmentation": true, "kappa": 0.1}

Values are resolved as command-line flags > config file > defaults.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from pathlib import Path

from .errors import ConfigError
from .trainer import TrainConfig

_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}
_TRUE = {"on", "true", "yes", "1"}
_FALSE = {"off", "false", "no", "0"}


def load_config_file(path) -> dict:
    """Read a flat JSON object; nested values or unknown keys are rejected."""
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a JSON object at the top level")
    for key, value in data.items():
        if isinstance(value, (dict, list)):
            raise ConfigError(f"{path}: key {key!r} must hold a scalar value")
    return data


def _coerce(key: str, value):
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    default = _FIELDS[key].default
    try:
        if isinstance(default, bool):
            if isinstance(value, bool):
                return value
            text = str(value).strip().lower()
            if text in _TRUE:
                return True
            if text in _FALSE:
                return False
            raise ValueError(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(default, float):
            return float(value)
        return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config key {key!r}: cannot use value {value!r}") from exc


def resolve_train_config(file_values: dict | None = None, overrides: dict | None = None) -> TrainConfig:
    """Defaults, then file values, then non-None overrides."""
    merged = {}
    for source in (file_values or {}, {k: v for k, v in (overrides or {}).items() if v is not None}):
        for key, value in source.items():
            merged[key] = _coerce(key, value)
    try:
        return TrainConfig(**merged)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def config_hash(config) -> str:
    """SHA-256 of the canonical JSON form of a config (dataclass or dict)."""
    data = dataclasses.asdict(config) if dataclasses.is_dataclass(config) else dict(config)
    text = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def save_config(config: TrainConfig, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    return path
