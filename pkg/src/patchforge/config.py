"""Run configuration: strict YAML loading and stable digests.

Unknown keys are rejected with the offending dotted path so typos fail
loudly instead of silently falling back to defaults.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import MISSING, dataclass, field, fields, is_dataclass
from enum import Enum
from pathlib import Path
from typing import Union, get_args, get_origin, get_type_hints

import yaml

from .attack import AttackConfig, AttackMode
from .corpus import CorpusConfig
from .detector import ToyDetectorConfig, TrainConfig
from .errors import ConfigError, InvalidInputError
from .evaluation import STANDARD_ANGLE_BINS, STANDARD_SCALE_BINS


@dataclass(frozen=True)
class EvalSettings:
    frames_per_cell: int = 3
    window: int = 100
    seed: int = 0
    scale_bins: tuple[float, ...] = STANDARD_SCALE_BINS
    angle_bins: tuple[float, ...] = STANDARD_ANGLE_BINS

    def __post_init__(self):
        if self.frames_per_cell < 1:
            raise InvalidInputError("frames_per_cell must be >= 1")
        if self.window < 1:
            raise InvalidInputError("window must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    detector: ToyDetectorConfig = field(default_factory=ToyDetectorConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    attack: AttackConfig = field(default_factory=lambda: AttackConfig(mode=AttackMode.HIDE))
    eval: EvalSettings = field(default_factory=EvalSettings)


def _convert(tp, value, path: str):
    origin = get_origin(tp)
    if origin is Union:
        args = [a for a in get_args(tp) if a is not type(None)]
        if value is None:
            if len(args) == len(get_args(tp)):
                raise ConfigError(f"{path}: null not allowed", key=path)
            return None
        return _convert(args[0], value, path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list", key=path)
        args = get_args(tp)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_convert(args[0], v, f"{path}[{i}]") for i, v in enumerate(value))
        if len(args) != len(value):
            raise ConfigError(f"{path}: expected {len(args)} entries, got {len(value)}", key=path)
        return tuple(_convert(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a mapping", key=path)
        return dict(value)
    if is_dataclass(tp):
        return build_dataclass(tp, value, path)
    if isinstance(tp, type) and issubclass(tp, Enum):
        try:
            return tp(value)
        except ValueError:
            allowed = ", ".join(repr(m.value) for m in tp)
            raise ConfigError(f"{path}: {value!r} not one of {allowed}", key=path) from None
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}", key=path)
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}", key=path)
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}", key=path)
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}", key=path)
        return value
    return value


def build_dataclass(cls, data, path: str = ""):
    """Instantiate a dataclass from nested plain data, rejecting unknown keys."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path or cls.__name__}: expected a mapping, got {data!r}",
                          key=path or cls.__name__)
    prefix = f"{path}." if path else ""
    hints = get_type_hints(cls)
    known = {f.name: f for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown config key '{prefix}{key}'", key=f"{prefix}{key}")
    kwargs = {}
    for name, f in known.items():
        if name in data:
            kwargs[name] = _convert(hints[name], data[name], f"{prefix}{name}")
        elif f.default is MISSING and f.default_factory is MISSING:
            raise ConfigError(f"missing required config key {prefix}{name}", key=f"{prefix}{name}")
    try:
        return cls(**kwargs)
    except InvalidInputError as exc:
        raise ConfigError(f"{path or cls.__name__}: {exc}", key=path or None) from exc


def load_run_config(path: str | Path | None) -> RunConfig:
    """Load a YAML run config; a missing path gives all defaults."""
    if path is None:
        return RunConfig()
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if data is None:
        data = {}
    return build_dataclass(RunConfig, data)


def _plain(value):
    if is_dataclass(value) and not isinstance(value, type):
        return {f.name: _plain(getattr(value, f.name)) for f in fields(value)}
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in sorted(value.items())}
    if isinstance(value, Path):
        return str(value)
    return value


def config_dict(config) -> dict:
    """Canonical JSON-ready form of any config dataclass."""
    return _plain(config)


def config_digest(config) -> str:
    """Stable content hash of a config; equal configs always agree."""
    canonical = json.dumps(config_dict(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()
