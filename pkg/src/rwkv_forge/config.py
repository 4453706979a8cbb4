"""TOML run configuration with sections ``[model]``, ``[train]``, ``[sampler]``, ``[bench]``.

Every key is optional; unknown keys are rejected with their dotted path.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .errors import ConfigError
from .generation import SamplerConfig
from .model import ModelConfig
from .training import TrainConfig


@dataclass
class BenchConfig:
    lengths: list[int] = field(default_factory=lambda: [1024, 2048, 4096, 8192])
    dim: int = 64
    repetitions: int = 3
    out: str = "bench.csv"


@dataclass
class CliConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "sampler": SamplerConfig, "bench": BenchConfig}


def _coerce(path: str, value, default):
    kind = type(default)
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if kind is list:
        if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{path}: expected a list of integers, got {value!r}")
        return value
    if not isinstance(value, kind):
        raise ConfigError(f"{path}: expected {kind.__name__}, got {value!r}")
    return value


def from_mapping(data: dict) -> CliConfig:
    cfg = CliConfig()
    for section, body in data.items():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config key: {section}")
        if not isinstance(body, dict):
            raise ConfigError(f"{section}: expected a table")
        target = getattr(cfg, section)
        known = {f.name for f in fields(target)}
        for key, value in body.items():
            path = f"{section}.{key}"
            if key not in known:
                raise ConfigError(f"unknown config key: {path}")
            setattr(target, key, _coerce(path, value, getattr(target, key)))
    return cfg


def load_config(path: str | Path | None) -> CliConfig:
    if path is None:
        return CliConfig()
    p = Path(path)
    text = p.read_text(encoding="utf-8")
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{p}: {exc}") from exc
    return from_mapping(data)
