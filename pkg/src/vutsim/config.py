"""Engine configuration: one YAML file with per-section defaults and range checks."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .scenario import ConfigError


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    n_modes: int = 3
    n_lanes: int = 4
    n_lane_points: int = 30
    n_crosswalks: int = 2
    n_crosswalk_points: int = 8
    n_layers: int = 2
    no_augment: bool = False
    v_max: float = 40.0

    def validate(self) -> None:
        _range("model.d_model", self.d_model, 4, 1024)
        _range("model.n_heads", self.n_heads, 1, 64)
        if self.d_model % self.n_heads:
            raise ConfigError("model.d_model must be divisible by model.n_heads")
        _range("model.n_modes", self.n_modes, 1, 32)
        _range("model.n_lanes", self.n_lanes, 1, 64)
        _range("model.n_lane_points", self.n_lane_points, 2, 500)
        _range("model.n_crosswalks", self.n_crosswalks, 0, 64)
        _range("model.n_crosswalk_points", self.n_crosswalk_points, 3, 64)
        _range("model.n_layers", self.n_layers, 1, 8)
        _range("model.v_max", self.v_max, 1.0, 100.0)


@dataclass(frozen=True)
class PlannerConfig:
    n_speeds: int = 7
    lateral_offsets: tuple = (-0.5, 0.0, 0.5)
    speed_margin: float = 1.1
    ramp_time: float = 2.5
    refine_steps: int = 20
    learning_rate: float = 0.05
    accel_min: float = -8.0
    accel_max: float = 4.0
    max_curvature: float = 0.2
    v_max: float = 40.0

    def validate(self) -> None:
        _range("planner.n_speeds", self.n_speeds, 1, 100)
        if not self.lateral_offsets:
            raise ConfigError("planner.lateral_offsets must not be empty")
        _range("planner.speed_margin", self.speed_margin, 0.1, 3.0)
        _range("planner.ramp_time", self.ramp_time, 0.1, 5.0)
        _range("planner.refine_steps", self.refine_steps, 0, 1000)
        _range("planner.learning_rate", self.learning_rate, 0.0, 10.0)
        _range("planner.accel_min", self.accel_min, -20.0, 0.0)
        _range("planner.accel_max", self.accel_max, 0.0, 20.0)
        _range("planner.max_curvature", self.max_curvature, 0.001, 10.0)
        _range("planner.v_max", self.v_max, 1.0, 100.0)


ABLATIONS = ("full", "single_valued", "no_augment")


@dataclass(frozen=True)
class TrainingConfig:
    lambda1: float = 1.0
    lambda2: float = 0.2
    lambda3: float = 1.0
    lambda4: float = 0.01
    learning_rate: float = 1e-2
    steps: int = 2000
    batch_size: int = 32
    seed: int = 0
    ablation: str = "full"
    grad_clip: float = 1.0
    momentum: float = 0.9
    fit_interval: int = 50
    fit_subset: int = 8
    lr_decay_start: float = 0.6

    @property
    def lambdas(self) -> tuple:
        return (self.lambda1, self.lambda2, self.lambda3, self.lambda4)

    def validate(self) -> None:
        for i, lam in enumerate(self.lambdas, 1):
            _range(f"training.lambda{i}", lam, 0.0, 1e6)
        if not any(l > 0 for l in self.lambdas):
            raise ConfigError("training: at least one lambda must be positive")
        _range("training.learning_rate", self.learning_rate, 0.0, 1.0)
        _range("training.steps", self.steps, 0, 10_000_000)
        _range("training.batch_size", self.batch_size, 1, 100_000)
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"training.ablation must be one of {ABLATIONS}")
        _range("training.grad_clip", self.grad_clip, 0.0, 1e6)
        _range("training.momentum", self.momentum, 0.0, 0.9999)
        _range("training.fit_interval", self.fit_interval, 1, 1_000_000)
        _range("training.fit_subset", self.fit_subset, 1, 100_000)
        _range("training.lr_decay_start", self.lr_decay_start, 0.0, 1.0)


@dataclass(frozen=True)
class SimConfig:
    start_step: int = 19
    duration_steps: int = 50
    replan_interval: int = 10
    sample_modes: bool = False

    def validate(self) -> None:
        _range("sim.start_step", self.start_step, 19, 100_000)
        _range("sim.duration_steps", self.duration_steps, 0, 100_000)
        _range("sim.replan_interval", self.replan_interval, 0, 50)


@dataclass(frozen=True)
class EngineConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    seed: int = 0

    def validate(self) -> None:
        self.model.validate()
        self.training.validate()
        self.planner.validate()
        self.sim.validate()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _range(name: str, value, lo, hi) -> None:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{name}: expected a number, got {value!r}")
    if not (lo <= value <= hi):
        raise ConfigError(f"{name}={value} outside [{lo}, {hi}]")


def _build(cls, raw: Optional[dict], section: str):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"{section}: expected a mapping")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(names))
    if unknown:
        raise ConfigError(f"unknown key '{section}.{unknown[0]}'")
    kwargs = {}
    for key, value in raw.items():
        default = getattr(cls(), key)
        if isinstance(default, tuple):
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{section}.{key}: expected a list")
            value = tuple(float(v) for v in value)
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{section}.{key}: expected true/false")
        elif isinstance(default, int):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{section}.{key}: expected an integer")
        elif isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{section}.{key}: expected a number")
            value = float(value)
        kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(raw: Optional[dict]) -> EngineConfig:
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigError("config: top level must be a mapping")
    unknown = sorted(set(raw) - {"model", "training", "planner", "sim", "seed"})
    if unknown:
        raise ConfigError(f"unknown key '{unknown[0]}'")
    seed = raw.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise ConfigError("seed: expected an integer")
    cfg = EngineConfig(
        model=_build(ModelConfig, raw.get("model"), "model"),
        training=_build(TrainingConfig, raw.get("training"), "training"),
        planner=_build(PlannerConfig, raw.get("planner"), "planner"),
        sim=_build(SimConfig, raw.get("sim"), "sim"),
        seed=seed,
    )
    cfg.validate()
    return cfg


def load_config(path) -> EngineConfig:
    if path is None:
        return config_from_dict({})
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from None
    return config_from_dict(raw)
