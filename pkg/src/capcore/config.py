"""Run configuration: one YAML file merged with environment and command-line overrides.

Precedence, highest first: command-line flags, ``CAPCORE_*`` environment
variables, the config file, built-in defaults.  Environment keys are
``CAPCORE_<SECTION>_<FIELD>`` in upper case, e.g. ``CAPCORE_TRAIN_EPOCHS=5``
or ``CAPCORE_MODEL_N_HEADS=1``.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional

import yaml

from .model import ModelConfig
from .training import TrainConfig

ENV_PREFIX = "CAPCORE_"


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    min_freq: int = 1
    vocab_cap: int = 10000
    n_visual: int = 8
    sampling: str = "uniform"
    test_fraction: float = 0.2


@dataclass
class ExtractConfig:
    input_size: int = 224
    stage_channels: tuple = (16, 32, 64)
    blocks_per_stage: int = 2
    feature_dim: int = 2048
    frames_per_video: int = 4
    seed: int = 0


@dataclass
class MetricConfig:
    smooth: bool = False
    stem: bool = True
    rouge_beta: float = 1.2


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    extract: ExtractConfig = field(default_factory=ExtractConfig)
    metrics: MetricConfig = field(default_factory=MetricConfig)
    keep_checkpoints: int = 3

    def to_dict(self) -> dict:
        d = asdict(self)
        d["extract"]["stage_channels"] = list(d["extract"]["stage_channels"])
        return d

    def dump(self, path) -> None:
        """Write the resolved config so the run can be replayed from it alone."""
        text = yaml.safe_dump(self.to_dict(), sort_keys=True, default_flow_style=False)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": DataConfig,
             "extract": ExtractConfig, "metrics": MetricConfig}


def _coerce(value: Any, f: dataclasses.Field, where: str) -> Any:
    """Turn env/flag strings (or YAML scalars) into the field's type."""
    if value is None:
        return None
    kind = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    try:
        if isinstance(value, str):
            value = yaml.safe_load(value) if value.strip() else value
        if "bool" in kind:
            if not isinstance(value, bool):
                raise ValueError("expected true/false")
            return value
        if "tuple" in kind:
            return tuple(int(v) for v in value)
        if "Optional[int]" in kind:
            return None if value is None else int(value)
        if "int" in kind:
            if isinstance(value, bool) or float(value) != int(value):
                raise ValueError("expected an integer")
            return int(value)
        if "float" in kind:
            return float(value)
        if "str" in kind:
            return str(value)
    except (TypeError, ValueError, yaml.YAMLError) as exc:
        raise ConfigError(f"{where}: bad value {value!r} ({exc})") from exc
    return value


def _fields(cls) -> dict:
    return {f.name: f for f in dataclasses.fields(cls)}


def _apply(layer: Mapping, target: dict, source: str) -> None:
    for key, value in layer.items():
        if key == "keep_checkpoints":
            target[key] = _coerce(value, _fields(RunConfig)["keep_checkpoints"], f"{source}:{key}")
            continue
        if key not in _SECTIONS:
            raise ConfigError(f"{source}: unknown section {key!r}")
        if not isinstance(value, Mapping):
            raise ConfigError(f"{source}: section {key!r} must be a mapping")
        known = _fields(_SECTIONS[key])
        for name, v in value.items():
            if name not in known:
                raise ConfigError(f"{source}: unknown key {key}.{name}")
            target.setdefault(key, {})[name] = _coerce(v, known[name], f"{source}:{key}.{name}")


def env_layer(environ: Mapping[str, str]) -> dict:
    out: dict = {}
    for name, value in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        rest = name[len(ENV_PREFIX):].lower()
        if rest == "keep_checkpoints":
            out[rest] = value
            continue
        section, _, key = rest.partition("_")
        if section not in _SECTIONS or not key:
            raise ConfigError(f"environment: unrecognised variable {name}")
        out.setdefault(section, {})[key] = value
    return out


def dotted_layer(pairs: Mapping[str, Any]) -> dict:
    """``{"train.epochs": 5}`` -> ``{"train": {"epochs": 5}}``; None values are dropped."""
    out: dict = {}
    for k, v in pairs.items():
        if v is None:
            continue
        if "." not in k:
            out[k] = v
            continue
        section, key = k.split(".", 1)
        out.setdefault(section, {})[key] = v
    return out


def load_config(path: Optional[str] = None, environ: Optional[Mapping[str, str]] = None,
                overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    merged: dict = {}
    if path:
        try:
            raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        _apply(raw, merged, str(path))
    _apply(env_layer(os.environ if environ is None else environ), merged, "environment")
    _apply(dotted_layer(overrides or {}), merged, "flags")
    try:
        kwargs = {name: cls(**merged.get(name, {})) for name, cls in _SECTIONS.items()}
        cfg = RunConfig(**kwargs, keep_checkpoints=merged.get("keep_checkpoints", 3))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.keep_checkpoints < 1:
        raise ConfigError("keep_checkpoints must be >= 1")
    return cfg
