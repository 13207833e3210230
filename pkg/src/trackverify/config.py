"""Flat dotted-key configuration shared by the CLI subcommands.

Keys are "<section>.<field>" over the four config dataclasses:
world.* (synthetic videos), perturb.* (candidate corruption), model.*
(verifier architecture) and train.* (optimization). A JSON config file is a
single flat object of such keys; unknown keys are rejected. Values given in
a config file override values given as command-line flags.
"""

from __future__ import annotations

import dataclasses
import json
import types
import typing
from pathlib import Path
from typing import Any

from .features import ModelConfig
from .perturb import PerturbationConfig
from .training import TrainingConfig
from .world import WorldConfig

__all__ = [
    "CONFIG_SECTIONS",
    "ConfigBundle",
    "ConfigError",
    "default_flat_config",
    "load_config_file",
    "resolve_configs",
]

CONFIG_SECTIONS: dict[str, type] = {
    "world": WorldConfig,
    "perturb": PerturbationConfig,
    "model": ModelConfig,
    "train": TrainingConfig,
}


class ConfigError(ValueError):
    """Bad configuration key or value; maps to a usage error in the CLI."""


@dataclasses.dataclass(frozen=True)
class ConfigBundle:
    world: WorldConfig
    perturb: PerturbationConfig
    model: ModelConfig
    train: TrainingConfig

    def validate(self) -> "ConfigBundle":
        for section in CONFIG_SECTIONS:
            getattr(self, section).validate()
        return self


def _field_types() -> dict[str, Any]:
    out: dict[str, Any] = {}
    for section, cls in CONFIG_SECTIONS.items():
        hints = typing.get_type_hints(cls)
        for f in dataclasses.fields(cls):
            out[f"{section}.{f.name}"] = hints[f.name]
    return out


_FIELD_TYPES = _field_types()


def default_flat_config() -> dict[str, Any]:
    """All known keys with their dataclass defaults (tuples as lists)."""
    out: dict[str, Any] = {}
    for section, cls in CONFIG_SECTIONS.items():
        instance = cls()
        for f in dataclasses.fields(cls):
            value = getattr(instance, f.name)
            if isinstance(value, tuple):
                value = list(value)
            out[f"{section}.{f.name}"] = value
    return out


def _coerce(key: str, value: Any) -> Any:
    """Cast a JSON value to the field's annotated type, or raise ConfigError."""
    hint = _FIELD_TYPES[key]
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if value is None:
            return None
        hint = args[0]
        origin = typing.get_origin(hint)
    if origin is tuple:
        elem = typing.get_args(hint)[0]
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key} expects a list, got {value!r}")
        values = tuple(value)
        if len(values) != len(typing.get_args(hint)):
            raise ConfigError(
                f"{key} expects {len(typing.get_args(hint))} values, got {len(values)}"
            )
        return tuple(_cast_scalar(key, elem, v) for v in values)
    return _cast_scalar(key, hint, value)


def _cast_scalar(key: str, hint: Any, value: Any) -> Any:
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} expects a number, got {value!r}")
        return float(value)
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} expects an integer, got {value!r}")
        if isinstance(value, float) and not value.is_integer():
            raise ConfigError(f"{key} expects an integer, got {value!r}")
        return int(value)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key} expects true or false, got {value!r}")
        return value
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key} expects a string, got {value!r}")
        return value
    raise ConfigError(f"{key} has unsupported type {hint}")


def load_config_file(path: str | Path) -> dict[str, Any]:
    """Read a flat JSON config; unknown keys and bad values raise ConfigError."""
    path = Path(path)
    try:
        obj = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise ConfigError(f"{path} must contain a JSON object of dotted keys")
    out: dict[str, Any] = {}
    for key, value in obj.items():
        if key not in _FIELD_TYPES:
            known = ", ".join(sorted({k.split(".")[0] for k in _FIELD_TYPES}))
            raise ConfigError(f"unknown config key {key!r} (sections: {known})")
        out[key] = _coerce(key, value)
    return out


def resolve_configs(
    flag_overrides: dict[str, Any] | None = None,
    config_path: str | Path | None = None,
) -> ConfigBundle:
    """Defaults, then command-line flag values, then config-file values."""
    merged = default_flat_config()
    for key, value in (flag_overrides or {}).items():
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        if value is not None:
            merged[key] = _coerce(key, value)
    if config_path is not None:
        merged.update(load_config_file(config_path))
    kwargs: dict[str, dict[str, Any]] = {section: {} for section in CONFIG_SECTIONS}
    for key, value in merged.items():
        section, field = key.split(".", 1)
        kwargs[section][field] = _coerce(key, value)
    bundle = ConfigBundle(**{s: cls(**kwargs[s]) for s, cls in CONFIG_SECTIONS.items()})
    try:
        return bundle.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
