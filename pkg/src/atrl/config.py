"""Versioned JSON experiment configs with strict key checking."""

from __future__ import annotations

import dataclasses
import json
import typing
from pathlib import Path

from .experiments import GravityConfig, SweepConfig, TemporalConfig
from .training import TrainConfig
from .transformer import ModelBudget

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclasses.dataclass
class TrainJob:
    """Single training run of a transformer on stored datasets."""

    budget: ModelBudget
    train_data: str
    test_data: str | None = None
    positional: str = "trainable"
    activation: str = "sigmoid"
    ff_residual: bool = False
    scaled_scores: bool = False
    model_seed: int = 0
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    checkpoint: str | None = None


KINDS = {"sweep": SweepConfig, "table1": TemporalConfig, "gravity": GravityConfig, "train": TrainJob}
TOP_KEYS = {"version", "kind", "config", "store"}


def _coerce(tp, value, where: str):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        return build(tp, value, where)
    if origin is tuple:
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list")
        args = typing.get_args(tp)
        elem = args[0] if len(args) == 2 and args[1] is Ellipsis else None
        if elem is None and len(args) != len(value):
            raise ConfigError(f"{where}: expected {len(args)} entries")
        return tuple(_coerce(elem or args[i], v, f"{where}[{i}]") for i, v in enumerate(value))
    if origin in (typing.Union, getattr(__import__("types"), "UnionType", None)):
        args = typing.get_args(tp)
        if value is None and type(None) in args:
            return None
        if value == "inf" and type(None) in args and int in args:
            return None  # infinite rank
        for a in args:
            if a is type(None):
                continue
            try:
                return _coerce(a, value, where)
            except ConfigError:
                pass
        raise ConfigError(f"{where}: {value!r} does not match {tp}")
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string")
        return value
    raise ConfigError(f"{where}: unsupported field type {tp}")


def build(cls, doc, where: str = "config"):
    """Instantiate dataclass ``cls`` from ``doc``; omitted keys keep defaults."""
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {k: _coerce(hints[k], v, f"{where}.{k}") for k, v in doc.items()}
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"{where}: {e}") from None
    except ValueError as e:
        raise ConfigError(f"{where}: {e}") from None


def parse_config(doc, kind: str):
    """Validate a whole config document and return (experiment config, store path or None)."""
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    unknown = sorted(set(doc) - TOP_KEYS)
    if unknown:
        raise ConfigError(f"unknown top-level keys {unknown}")
    if doc.get("version") != CONFIG_VERSION:
        raise ConfigError(f"config version must be {CONFIG_VERSION}, got {doc.get('version')!r}")
    if doc.get("kind") != kind:
        raise ConfigError(f"config kind is {doc.get('kind')!r}, this command needs {kind!r}")
    store = doc.get("store")
    if store is not None and not isinstance(store, str):
        raise ConfigError("store must be a path string")
    return build(KINDS[kind], doc.get("config", {})), store


def load_config(path, kind: str):
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON ({e})") from None
    return parse_config(doc, kind)


def config_document(cfg, kind: str, store: str | None = None) -> dict:
    doc = {"version": CONFIG_VERSION, "kind": kind, "config": _plain(dataclasses.asdict(cfg))}
    if store is not None:
        doc["store"] = store
    return doc


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x
