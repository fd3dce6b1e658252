"""Run configuration stored as a single versioned JSON document."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .diffusion import ddim_grid

SCHEMA_VERSION = 1
CLOSED_LOOP_MODES = ("renoise", "renoise+steer")


class ConfigError(ValueError):
    pass


@dataclass
class ScheduleConfig:
    T: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 0.02
    M: int = 20
    lam: float = 0.2


@dataclass
class GraphConfig:
    P: int = 25
    L_pad: int = 25
    B: int = 124
    object_feature_dim: int = 64
    geom_embed_dim: int = 128
    n_points: int = 512


@dataclass
class ModelConfig:
    d: int = 64
    n_layers: int = 6
    ff_mult: int = 2
    length_unit: float = 0.05  # meters per model unit


@dataclass
class TrainingConfig:
    gamma_p: float = 1.0
    gamma_r: float = 1.0
    epochs: int = 300
    batch_size: int = 16
    lr: float = 1e-4
    lr_decay: float = 0.8
    lr_decay_every: int = 20
    max_steps: int | None = None


@dataclass
class GuidanceConfig:
    strength: float = 0.5
    t_star: int | None = None  # None: grid step nearest 0.15 * T
    closed_loop_mode: str = "renoise+steer"


@dataclass
class RunConfig:
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    graph: GraphConfig = field(default_factory=GraphConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    seed: int = 0
    paths: dict = field(default_factory=dict)

    def validate(self) -> RunConfig:
        s, g, m, t, gd = self.schedule, self.graph, self.model, self.training, self.guidance
        checks = [
            (s.T >= 1, "schedule.T must be >= 1"),
            (0 < s.beta_min < s.beta_max < 1, "need 0 < beta_min < beta_max < 1"),
            (1 <= s.M <= s.T, "schedule.M must lie in [1, T]"),
            (s.lam >= 0, "schedule.lam must be >= 0"),
            (g.P >= 1 and g.L_pad >= 1 and g.B >= 1 and g.n_points >= g.P, "graph sizes must be positive and n_points >= P"),
            (g.object_feature_dim == 64 and g.geom_embed_dim == 128, "feature widths are fixed at 64 (object) and 128 (link)"),
            (m.d >= 2 and m.n_layers >= 1 and m.ff_mult >= 1, "model sizes must be positive"),
            (m.length_unit > 0, "model.length_unit must be > 0"),
            (t.gamma_p >= 0 and t.gamma_r >= 0, "loss weights must be >= 0"),
            (t.epochs >= 1 and t.batch_size >= 1 and t.lr > 0 and 0 < t.lr_decay <= 1 and t.lr_decay_every >= 1, "bad training settings"),
            (t.max_steps is None or t.max_steps >= 1, "training.max_steps must be >= 1"),
            (gd.strength >= 0, "guidance.strength must be >= 0"),
            (gd.t_star is None or 1 <= gd.t_star <= s.T, "guidance.t_star must lie in [1, T]"),
            (gd.closed_loop_mode in CLOSED_LOOP_MODES, f"guidance.closed_loop_mode must be one of {CLOSED_LOOP_MODES}"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, **asdict(self)}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


_SECTIONS = {
    "schedule": ScheduleConfig,
    "graph": GraphConfig,
    "model": ModelConfig,
    "training": TrainingConfig,
    "guidance": GuidanceConfig,
}


def _section(cls, doc, name: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    return cls(**doc)


def config_from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    version = doc.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported config schema_version {version}")
    unknown = set(doc) - set(_SECTIONS) - {"schema_version", "seed", "paths"}
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {name: _section(cls, doc.get(name, {}), name) for name, cls in _SECTIONS.items()}
    try:
        return RunConfig(**kwargs, seed=int(doc.get("seed", 0)), paths=dict(doc.get("paths", {}))).validate()
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad config value: {exc}") from exc


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return config_from_dict(doc)


def default_t_star(T: int, M: int) -> int:
    """Grid step nearest 0.15 * T."""
    grid = ddim_grid(T, M)
    return int(grid[int(np.argmin(np.abs(grid - 0.15 * T)))])

