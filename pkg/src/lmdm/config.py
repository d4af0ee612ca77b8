"""Run configuration: one YAML file with a section per component.

Every key has a default (the dataclass defaults below). Unknown keys are
rejected with their dotted path so typos fail loudly.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields
from enum import Enum
from pathlib import Path

import yaml

from .arcforcing import ArcConfig, LossWeights, RolloutConfig
from .data import SyntheticSpec
from .dit import ModelConfig
from .errors import ConfigError
from .flowcore import SamplerConfig
from .train import TrainConfig

SEED_ENV = "LMDM_SEED"


@dataclass(frozen=True)
class DataConfig:
    items: int = 512
    corpus_dir: str = "runs/corpus"
    seed: int = 0
    accompaniment: bool = False
    future_visibility: int = 0


@dataclass(frozen=True)
class PathsConfig:
    checkpoint: str = "runs/model.lmdc"
    posttrained: str = "runs/model_arc.lmdc"
    train_log: str = "runs/train_loss.csv"
    arc_metrics: str = "runs/arc_metrics.csv"
    samples: str = "runs/sample.lat"
    bench_csv: str = "runs/bench.csv"


@dataclass(frozen=True)
class BenchConfig:
    engines: tuple = ("baseline", "encdec", "blockcausal")
    trials: int = 30
    warmup: int = 5
    blocks: int = 3
    batch: int = 1


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    rollout: RolloutConfig = field(default_factory=RolloutConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    spec: SyntheticSpec = field(default_factory=SyntheticSpec)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    arc: ArcConfig = field(default_factory=ArcConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)


_SECTIONS = {
    "model": ModelConfig, "sampler": SamplerConfig, "rollout": RolloutConfig,
    "loss": LossWeights, "spec": SyntheticSpec, "data": DataConfig, "train": TrainConfig,
    "arc": ArcConfig, "bench": BenchConfig, "paths": PathsConfig,
}


def _convert(value, default):
    """Coerce YAML scalars/lists to the type of the default value."""
    if isinstance(default, tuple) and isinstance(value, list):
        return tuple(value)
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


def _build(cls, raw: dict, where: str):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be a mapping, got {type(raw).__name__}")
    names = {f.name: f for f in fields(cls)}
    for key in raw:
        if key not in names:
            raise ConfigError(f"unknown config key: {where}.{key}" if where else
                              f"unknown config key: {key}")
    default = cls()
    kwargs = {}
    for key, value in raw.items():
        dv = getattr(default, key)
        if isinstance(value, list) and key == "levels":
            value = tuple(value)
        kwargs[key] = _convert(value, dv)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def from_dict(raw: dict | None) -> RunConfig:
    raw = dict(raw or {})
    for key in raw:
        if key not in _SECTIONS and key != "seed":
            raise ConfigError(f"unknown config key: {key}")
    kwargs = {name: _build(cls, raw.get(name), name) for name, cls in _SECTIONS.items()}
    if "seed" in raw:
        kwargs["seed"] = int(raw["seed"])
    return RunConfig(**kwargs)


def _plain(value):
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    return value


def to_dict(cfg: RunConfig) -> dict:
    out = {"seed": cfg.seed}
    for name in _SECTIONS:
        section = getattr(cfg, name)
        out[name] = {f.name: _plain(getattr(section, f.name)) for f in fields(section)}
    return out


def load(path=None, env=None) -> RunConfig:
    """Read a YAML file (or defaults) and apply the seed environment override."""
    raw = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
    cfg = from_dict(raw)
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            cfg = dataclasses.replace(cfg, seed=int(env[SEED_ENV]))
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer") from exc
    return cfg


def dump(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)


def override(cfg: RunConfig, dotted: str, value) -> RunConfig:
    """Replace one ``section.key`` (or ``seed``) value, validating the key."""
    return override_many(cfg, [(dotted, value)])


def override_many(cfg: RunConfig, pairs) -> RunConfig:
    """Apply several ``(dotted, value)`` overrides, validating once at the end.

    Coupled fields (say ``model.hidden`` and ``model.heads``) can then be
    changed together.
    """
    raw = to_dict(cfg)
    for dotted, value in pairs:
        parts = dotted.split(".")
        if parts == ["seed"]:
            raw["seed"] = value
        elif len(parts) == 2 and parts[0] in raw and isinstance(raw[parts[0]], dict):
            if parts[1] not in raw[parts[0]]:
                raise ConfigError(f"unknown config key: {dotted}")
            raw[parts[0]][parts[1]] = value
        else:
            raise ConfigError(f"unknown config key: {dotted}")
    return from_dict(raw)
