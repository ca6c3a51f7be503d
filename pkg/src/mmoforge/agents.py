"""Agent state, skill experience, and the stat formulas derived from skill levels."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .config import Config

SKILLS = ("hunting", "fishing", "constitution", "melee", "range", "mage", "defense")
COMBAT_SKILLS = ("constitution", "melee", "range", "mage", "defense")


@dataclass
class Skills:
    hunting: float = 0.0
    fishing: float = 0.0
    constitution: float = 0.0
    melee: float = 0.0
    range: float = 0.0
    mage: float = 0.0
    defense: float = 0.0

    def level(self, skill: str, unit: float = 100.0) -> int:
        return level_from_xp(getattr(self, skill), unit)

    def copy(self) -> Skills:
        return Skills(**{s: getattr(self, s) for s in SKILLS})


@dataclass
class AgentState:
    agent_id: int
    population: int
    pos: tuple[int, int]
    food: int
    water: int
    health: int
    spawn_tick: int
    skills: Skills = field(default_factory=Skills)
    frozen_until: int = -1
    alive: bool = True

    def is_frozen(self, tick: int) -> bool:
        return tick <= self.frozen_until


def level_from_xp(xp: float, unit: float = 100.0) -> int:
    if xp < 0:
        raise ValueError("experience must be non-negative")
    # isqrt on the integer part keeps exact squares (100, 400, ...) exact.
    q = xp / unit
    level = math.isqrt(int(q))
    if (level + 1) ** 2 <= q:
        level += 1
    return 1 + level


def overall_level(skills: Skills, unit: float = 100.0) -> int:
    total = sum(level_from_xp(getattr(skills, s), unit) for s in COMBAT_SKILLS)
    # half-up rounding of the mean
    return int(math.floor(total / len(COMBAT_SKILLS) + 0.5))


def food_cap(skills: Skills, cfg: Config) -> int:
    return cfg.food_max + level_from_xp(skills.hunting, cfg.progression.xp_per_level_unit) - 1


def water_cap(skills: Skills, cfg: Config) -> int:
    return cfg.water_max + level_from_xp(skills.fishing, cfg.progression.xp_per_level_unit) - 1


def max_health(skills: Skills, cfg: Config) -> int:
    return cfg.health_max + level_from_xp(skills.constitution, cfg.progression.xp_per_level_unit) - 1


def grant_xp(skills: Skills, skill: str, amount: float, xp_scale: float = 1.0) -> Skills:
    if skill not in SKILLS:
        raise ValueError(f"unknown skill: {skill!r}")
    if amount < 0:
        raise ValueError("experience award must be non-negative")
    setattr(skills, skill, getattr(skills, skill) + amount * xp_scale)
    return skills


def spawn_agent(agent_id: int, population: int, pos: tuple[int, int], tick: int, cfg: Config) -> AgentState:
    return AgentState(
        agent_id=agent_id,
        population=population,
        pos=pos,
        food=cfg.food_max,
        water=cfg.water_max,
        health=cfg.health_max,
        spawn_tick=tick,
    )
