"""Typed configuration and named deterministic RNG streams."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

RNG_STREAMS = ("map_gen", "spawning", "combat", "policy_sampling", "init")

SPAWN_REGIONS = ("border", "center")
ATTACK_RULES = ("spawn_safety", "level_range")


class ConfigError(ValueError):
    """Raised when a configuration key is unknown or an invariant is violated."""


@dataclass(frozen=True)
class CombatConfig:
    melee_range: int = 1
    range_range: int = 3
    mage_range: int = 4
    melee_damage: int = 3
    range_damage: int = 2
    mage_damage: int = 1
    freeze_ticks: int = 3
    accuracy_slope: float = 0.05
    accuracy_floor: float = 0.1
    accuracy_ceiling: float = 0.95

    def validate(self) -> None:
        for name in ("melee_range", "range_range", "mage_range"):
            if getattr(self, name) < 1:
                raise ConfigError(f"combat.{name} must be >= 1")
        if not 0.0 <= self.accuracy_floor < self.accuracy_ceiling <= 1.0:
            raise ConfigError("combat accuracy must satisfy 0 <= floor < ceiling <= 1")
        if self.freeze_ticks < 0:
            raise ConfigError("combat.freeze_ticks must be >= 0")


@dataclass(frozen=True)
class ProgressionConfig:
    xp_per_level_unit: float = 100.0
    forage_xp: float = 10.0
    combat_xp_per_damage: float = 10.0
    forage_food_gain: int = 5
    forage_water_gain: int = 5

    def validate(self) -> None:
        if self.xp_per_level_unit <= 0:
            raise ConfigError("progression.xp_per_level_unit must be > 0")
        if self.forage_food_gain < 0 or self.forage_water_gain < 0:
            raise ConfigError("progression forage gains must be >= 0")


@dataclass(frozen=True)
class Config:
    map_width: int = 64
    map_height: int = 64
    border_thickness: int = 8
    spawn_cap: int = 128
    spawn_region: str = "border"
    food_max: int = 10
    water_max: int = 10
    health_max: int = 10
    starvation_rate: int = 1
    regen_rate: int = 1
    forest_regen_ticks: int = 15
    combat: CombatConfig = field(default_factory=CombatConfig)
    progression: ProgressionConfig = field(default_factory=ProgressionConfig)
    attack_rule: str = "spawn_safety"
    spawn_safety_ticks: int = 15
    level_range: int = 5
    n_populations: int = 8
    obs_crop: int = 15
    obs_agent_cap: int = 32
    gamma: float = 0.95
    lr: float = 3e-4
    weight_decay: float = 1e-5
    grad_clip: float = 5.0
    batch_actions: int = 16384
    entropy_coef: float = 0.0
    embed_dim: int = 32
    hidden_dim: int = 64
    tile_aggregator: str = "conv"
    xp_scale: float = 1.0
    noise_octaves: int = 3
    noise_scale: float = 16.0
    t_water: float = 0.25
    t_forest_lo: float = 0.55
    t_forest_hi: float = 0.75
    t_stone: float = 0.85
    difficulty_gradient: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        self.validate()

    @property
    def width(self) -> int:
        """Full grid width including the lava ring."""
        return self.map_width + 2 * self.border_thickness

    @property
    def height(self) -> int:
        return self.map_height + 2 * self.border_thickness

    def validate(self) -> None:
        if self.spawn_cap < 1:
            raise ConfigError("spawn_cap must be >= 1")
        if self.obs_crop < 1 or self.obs_crop % 2 == 0:
            raise ConfigError("obs_crop must be a positive odd number")
        if self.obs_agent_cap < 1:
            raise ConfigError("obs_agent_cap must be >= 1")
        for name in ("food_max", "water_max", "health_max"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError("gamma must be in (0,1)")
        if self.embed_dim <= 0 or self.hidden_dim <= 0:
            raise ConfigError("embed_dim and hidden_dim must be > 0")
        if self.map_width < self.obs_crop or self.map_height < self.obs_crop:
            raise ConfigError("map_width and map_height must be >= obs_crop")
        if self.border_thickness < 1:
            raise ConfigError("border_thickness must be >= 1")
        if self.spawn_region not in SPAWN_REGIONS:
            raise ConfigError(f"spawn_region must be one of {SPAWN_REGIONS}")
        if self.attack_rule not in ATTACK_RULES:
            raise ConfigError(f"attack_rule must be one of {ATTACK_RULES}")
        if self.n_populations < 1:
            raise ConfigError("n_populations must be >= 1")
        if self.forest_regen_ticks < 1:
            raise ConfigError("forest_regen_ticks must be >= 1")
        if self.lr <= 0 or self.weight_decay < 0 or self.grad_clip <= 0:
            raise ConfigError("lr and grad_clip must be > 0, weight_decay >= 0")
        if self.batch_actions < 1:
            raise ConfigError("batch_actions must be >= 1")
        if self.tile_aggregator not in ("conv", "mean"):
            raise ConfigError("tile_aggregator must be 'conv' or 'mean'")
        if self.noise_octaves < 1 or self.noise_scale <= 0:
            raise ConfigError("noise_octaves must be >= 1 and noise_scale > 0")
        if not self.t_water < self.t_forest_lo < self.t_forest_hi < self.t_stone:
            raise ConfigError("terrain thresholds must satisfy t_water < t_forest_lo < t_forest_hi < t_stone")
        self.combat.validate()
        self.progression.validate()

    def replace(self, **changes: Any) -> Config:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        """Flat dict; nested sections use dotted keys (``combat.freeze_ticks``)."""
        out: dict[str, Any] = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if dataclasses.is_dataclass(value):
                for sub in dataclasses.fields(value):
                    out[f"{f.name}.{sub.name}"] = getattr(value, sub.name)
            else:
                out[f.name] = value
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def digest(self) -> bytes:
        """16-byte hash of the canonical JSON form, used in checkpoint headers."""
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).digest()[:16]


def default_config() -> Config:
    return Config()


def config_from_dict(overrides: dict[str, Any], base: Config | None = None) -> Config:
    base = base or default_config()
    top = {f.name: f for f in dataclasses.fields(Config)}
    flat: dict[str, Any] = {}
    nested: dict[str, dict[str, Any]] = {"combat": {}, "progression": {}}
    for key, value in overrides.items():
        section, _, sub = key.partition(".")
        if sub:
            if section not in nested:
                raise ConfigError(f"unknown config key: {key}")
            cls = type(getattr(base, section))
            if sub not in {f.name for f in dataclasses.fields(cls)}:
                raise ConfigError(f"unknown config key: {key}")
            nested[section][sub] = value
        elif key in nested and isinstance(value, dict):
            for k, v in value.items():
                nested[key][k] = v
        elif key in top:
            flat[key] = value
        else:
            raise ConfigError(f"unknown config key: {key}")

    for key, value in flat.items():
        expected = type(getattr(base, key))
        if expected is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if expected is int and isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, expected) or (expected is int and isinstance(value, bool)):
            raise ConfigError(f"config key {key} expects {expected.__name__}, got {type(value).__name__}")
        flat[key] = value
    for section, values in nested.items():
        if values:
            try:
                flat[section] = dataclasses.replace(getattr(base, section), **values)
            except TypeError as exc:
                raise ConfigError(f"bad {section} section: {exc}") from exc
    return dataclasses.replace(base, **flat)


def load_config(path: str | Path) -> Config:
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    return config_from_dict(data)


def seed_rng(seed: int, stream: str) -> np.random.Generator:
    """Independent generator for ``stream``; same (seed, stream) gives the same sequence."""
    if stream not in RNG_STREAMS:
        raise ValueError(f"unknown rng stream: {stream!r}")
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=(RNG_STREAMS.index(stream),))
    return np.random.Generator(np.random.PCG64(ss))
