"""JSON experiment configs with sections {world, model, train, sampler, loss}."""

from __future__ import annotations

import copy
import dataclasses
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

from ..flow import LossConfig
from ..model import ModelConfig
from ..sampler import SamplerConfig
from ..world import WorldConfig


class ConfigError(ValueError):
    """Invalid config file, section, key or value."""


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.95
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-5
    warmup_frac: float = 0.05
    steps: int = 5000
    batch_size: int = 64
    seed: int = 0
    grad_clip_norm: float = 1.0
    reset_optimizer_on_finetune: bool = True
    data_episodes: int = 2000
    data_seed: int = 0
    eval_episodes: int = 200
    eval_seed: int = 10_000

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError(f"train.steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ConfigError(f"train.batch_size must be >= 1, got {self.batch_size}")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("train.lr and train.weight_decay must be nonnegative")

    @property
    def warmup_steps(self) -> int:
        return math.ceil(self.warmup_frac * self.steps)


SECTIONS = {"world": WorldConfig, "model": ModelConfig, "train": TrainConfig,
            "sampler": SamplerConfig, "loss": LossConfig}


@dataclass
class ExperimentConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        w, m = self.world, self.model
        pairs = [("k", w.k, m.k), ("m", w.m, m.m), ("d_o", w.d_o, m.d_o),
                 ("d_ctx/d_model", w.d_ctx, m.d_model)]
        for name, a, b in pairs:
            if a != b:
                raise ConfigError(f"world and model disagree on {name}: {a} vs {b}")
        if m.d_A != 2 or m.d_s != 2 or m.n_ctx != 2:
            raise ConfigError("the point-mass world needs model.d_A = d_s = n_ctx = 2")

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in SECTIONS}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = d or {}
        unknown = set(d) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
        parts = {}
        for name, klass in SECTIONS.items():
            sec = d.get(name, {}) or {}
            if not isinstance(sec, dict):
                raise ConfigError(f"config section {name!r} must be an object")
            allowed = {f.name for f in dataclasses.fields(klass)}
            bad = set(sec) - allowed
            if bad:
                raise ConfigError(f"unknown key(s) in section {name!r}: {sorted(bad)}")
            try:
                parts[name] = klass(**sec)
            except ConfigError:
                raise
            except (TypeError, ValueError) as e:
                raise ConfigError(f"section {name!r}: {e}") from None
        return cls(**parts)

    def replace(self, **sections) -> "ExperimentConfig":
        d = self.to_dict()
        for name, upd in sections.items():
            d[name].update(upd)
        return ExperimentConfig.from_dict(d)


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(d: dict, overrides) -> dict:
    """Apply ``section.key=value`` strings; values parse as JSON when possible."""
    d = copy.deepcopy(d)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        key, val = item.split("=", 1)
        parts = key.strip().split(".")
        if len(parts) != 2:
            raise ConfigError(f"override key {key!r} must be section.key")
        sec, name = parts
        if sec not in SECTIONS:
            raise ConfigError(f"unknown config section {sec!r} in override {item!r}")
        allowed = {f.name for f in dataclasses.fields(SECTIONS[sec])}
        if name not in allowed:
            raise ConfigError(f"unknown key {key!r} in override")
        d.setdefault(sec, {})[name] = parse_value(val)
    return d


def load_config(path=None, overrides=()) -> ExperimentConfig:
    base: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            base = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {p} is not valid JSON: {e}") from None
        if not isinstance(base, dict):
            raise ConfigError(f"config file {p} must contain a JSON object")
    return ExperimentConfig.from_dict(apply_overrides(base, overrides))
