"""Flat ``key=value`` config files with typed parsing.

Keys name fields of :class:`TrainConfig`; model fields may be given bare
(``num_slots=5``) or prefixed (``model.num_slots=5``).
"""

from __future__ import annotations

import typing
from dataclasses import fields
from pathlib import Path

from .model import SlotVAEConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


def read_pairs(path) -> dict[str, str]:
    pairs = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{path}:{n}: expected key=value, got {raw!r}")
        pairs[key.strip()] = value.strip()
    return pairs


def _coerce(value: str, tp):
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value.lower() in ("none", "null", ""):
            return None
        return _coerce(value, args[0])
    if tp is bool:
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if tp is int:
        return int(value)
    if tp is float:
        return float(value)
    return value


def apply_pairs(cfg: TrainConfig, pairs: dict[str, str]) -> TrainConfig:
    """Return a new config with ``pairs`` applied on top of ``cfg``."""
    train_types = typing.get_type_hints(TrainConfig)
    model_types = typing.get_type_hints(SlotVAEConfig)
    train_kw = {f.name: getattr(cfg, f.name) for f in fields(TrainConfig) if f.name != "model"}
    model_kw = cfg.model.to_dict()
    for key, value in pairs.items():
        name = key.removeprefix("model.")
        try:
            if key.startswith("model.") or (name in model_types and name not in train_types):
                if name not in model_types:
                    raise ConfigError(f"unknown model key {key!r}")
                model_kw[name] = _coerce(value, model_types[name])
            elif name in train_types and name != "model":
                train_kw[name] = _coerce(value, train_types[name])
            else:
                raise ConfigError(f"unknown config key {key!r}")
        except ValueError as err:
            if isinstance(err, ConfigError):
                raise
            raise ConfigError(f"bad value for {key!r}: {err}") from err
    try:
        return TrainConfig(model=SlotVAEConfig(**model_kw), **train_kw)
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from err


def load_config(path=None, overrides: dict[str, str] | None = None) -> TrainConfig:
    pairs = read_pairs(path) if path else {}
    pairs.update(overrides or {})
    return apply_pairs(TrainConfig(), pairs)


def dump_config(cfg: TrainConfig) -> str:
    lines = [f"{f.name}={getattr(cfg, f.name)}" for f in fields(TrainConfig) if f.name != "model"]
    lines += [f"model.{k}={v}" for k, v in cfg.model.to_dict().items()]
    return "\n".join(lines) + "\n"
