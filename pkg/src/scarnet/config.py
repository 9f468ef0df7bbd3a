"""Run configuration: nested dataclasses with layered loading.

Layers, lowest first: built-in defaults, a YAML/JSON file, dot-path
overrides such as ``train.epochs=0``.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError
from .losses import LossWeights
from .model import ModelConfig
from .phantom import AugmentParams
from .training import TrainConfig


@dataclass
class DataConfig:
    count: int = 32
    seed: int = 0
    augment: AugmentParams = field(default_factory=AugmentParams)

    def validate(self):
        if self.count < 0:
            raise ConfigError("data.count must be >= 0")
        if self.seed < 0:
            raise ConfigError("data.seed must be unsigned")


@dataclass
class EvalConfig:
    n_iter: int = 200
    sigma: float = 0.05
    seed: int = 0

    def validate(self):
        if self.n_iter < 1:
            raise ConfigError("eval.n_iter must be >= 1")
        if self.sigma < 0:
            raise ConfigError("eval.sigma must be >= 0")
        if self.seed < 0:
            raise ConfigError("eval.seed must be unsigned")


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self):
        self.data.validate()
        self.model.validate()
        self.loss.validate()
        self.train.validate()
        self.eval.validate()
        return self

    def to_dict(self):
        return _plain(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, d):
        return build(cls, d, "").validate()


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _coerce(value, default, path):
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
    elif isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif isinstance(default, str):
        if isinstance(value, str):
            return value
    elif isinstance(default, (list, tuple)):
        if isinstance(value, (list, tuple)):
            out = [_coerce(v, default[0], f"{path}[{i}]") if default else v for i, v in enumerate(value)]
            return type(default)(out)
    raise ConfigError(f"{path}: expected {type(default).__name__}, got {value!r}")


def build(cls, d, prefix):
    """Instantiate dataclass ``cls`` from a dict, rejecting unknown keys."""
    inst = cls()
    if d is None:
        return inst
    if not isinstance(d, dict):
        raise ConfigError(f"{prefix or 'config'}: expected a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    for key, value in d.items():
        path = f"{prefix}.{key}" if prefix else key
        if key not in names:
            raise ConfigError(f"unknown config key '{path}'")
        default = getattr(inst, key)
        if dataclasses.is_dataclass(default):
            setattr(inst, key, build(type(default), value, path))
        else:
            setattr(inst, key, _coerce(value, default, path))
    try:
        if hasattr(inst, "__post_init__"):
            inst.__post_init__()
    except ValueError as exc:
        raise ConfigError(f"{prefix}: {exc}") from None
    return inst


def set_path(d: dict, dotted: str, value):
    keys = dotted.split(".")
    node = d
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            raise ConfigError(f"unknown config key '{dotted}'")
        node = node[k]
    if keys[-1] not in node:
        raise ConfigError(f"unknown config key '{dotted}'")
    node[keys[-1]] = value


def parse_value(text: str):
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


def load_config(path=None, overrides=()) -> RunConfig:
    """Defaults < file < overrides. ``overrides`` holds ``(dotted_key, value)``
    pairs or ``"key=value"`` strings."""
    merged = RunConfig().to_dict()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} not found")
        try:
            data = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{p}: {exc}") from None
        _merge(merged, data, "")
    for item in overrides:
        if isinstance(item, str):
            if "=" not in item:
                raise ConfigError(f"override '{item}' is not key=value")
            key, raw = item.split("=", 1)
            value = parse_value(raw)
        else:
            key, value = item
        set_path(merged, key, value)
    return RunConfig.from_dict(merged)


def _merge(base: dict, new: dict, prefix):
    if not isinstance(new, dict):
        raise ConfigError(f"{prefix or 'config'}: expected a mapping")
    for k, v in new.items():
        path = f"{prefix}.{k}" if prefix else k
        if k not in base:
            raise ConfigError(f"unknown config key '{path}'")
        if isinstance(base[k], dict):
            _merge(base[k], v, path)
        else:
            base[k] = v


def leaf_fields(cfg=None, prefix=""):
    """Yield ``(dotted_key, default_value)`` for every leaf field."""
    cfg = RunConfig() if cfg is None else cfg
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        path = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(value):
            yield from leaf_fields(value, path + ".")
        else:
            yield path, value


def dump_config(cfg: RunConfig, path):
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))


def config_json(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_dict(), sort_keys=True)
