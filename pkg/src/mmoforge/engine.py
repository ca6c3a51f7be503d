"""The per-tick state transition: movement, combat, foraging, survival, death, spawning.

Phase order inside :func:`step` is fixed so replays are bitwise deterministic:

1. freeze expiry (implicit: ``frozen_until`` is compared against the tick)
2. movement, ascending agent id
3. attacks, ascending attacker id, against post-movement positions
4. foraging
5. survival upkeep
6. deaths and pilfering
7. spawning
8. tile regrowth
9. tick += 1
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Any

import numpy as np

from . import world
from .agents import (
    AgentState,
    food_cap,
    grant_xp,
    max_health,
    overall_level,
    spawn_agent,
    water_cap,
)
from .config import Config, seed_rng
from .world import Terrain, TileMap

log = logging.getLogger(__name__)


class Move(IntEnum):
    NORTH = 0
    SOUTH = 1
    EAST = 2
    WEST = 3
    STAY = 4


class Style(IntEnum):
    MELEE = 0
    RANGE = 1
    MAGE = 2


MOVE_DELTAS = {
    Move.NORTH: (-1, 0),
    Move.SOUTH: (1, 0),
    Move.EAST: (0, 1),
    Move.WEST: (0, -1),
    Move.STAY: (0, 0),
}
STYLE_SKILL = {Style.MELEE: "melee", Style.RANGE: "range", Style.MAGE: "mage"}
NEIGHBORS4 = ((-1, 0), (1, 0), (0, 1), (0, -1))


@dataclass(frozen=True)
class Attack:
    style: Style
    target: int


@dataclass(frozen=True)
class ActionBundle:
    move: Move = Move.STAY
    attack: Attack | None = None


IDLE = ActionBundle()


@dataclass
class TickEvents:
    tick: int
    spawns: list[dict[str, Any]] = field(default_factory=list)
    moves: list[dict[str, Any]] = field(default_factory=list)
    hits: list[dict[str, Any]] = field(default_factory=list)
    misses: list[dict[str, Any]] = field(default_factory=list)
    forages: list[dict[str, Any]] = field(default_factory=list)
    upkeep: list[dict[str, Any]] = field(default_factory=list)
    deaths: list[dict[str, Any]] = field(default_factory=list)
    pilfers: list[dict[str, Any]] = field(default_factory=list)
    warnings: list[dict[str, Any]] = field(default_factory=list)

    def to_record(self) -> dict[str, Any]:
        return {
            "tick": self.tick,
            "spawns": self.spawns,
            "moves": self.moves,
            "hits": self.hits,
            "misses": self.misses,
            "forages": self.forages,
            "upkeep": self.upkeep,
            "deaths": self.deaths,
            "pilfers": self.pilfers,
            "warnings": self.warnings,
        }


@dataclass
class WorldState:
    cfg: Config
    map: TileMap
    agents: dict[int, AgentState]
    rng_spawn: np.random.Generator
    rng_combat: np.random.Generator
    spawn_tiles: np.ndarray  # (n, 2) candidate spawn positions
    tick: int = 0
    next_agent_id: int = 0
    spawn_count: int = 0

    def living(self) -> list[AgentState]:
        return [self.agents[k] for k in sorted(self.agents)]

    def state_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.array([self.tick, self.next_agent_id, self.spawn_count], dtype=np.int64).tobytes())
        h.update(self.map.terrain.tobytes())
        h.update(self.map.regen.tobytes())
        for aid in sorted(self.agents):
            a = self.agents[aid]
            s = a.skills
            h.update(
                repr(
                    (
                        a.agent_id, a.population, a.pos, a.food, a.water, a.health,
                        a.spawn_tick, a.frozen_until, s.hunting, s.fishing,
                        s.constitution, s.melee, s.range, s.mage, s.defense,
                    )
                ).encode()
            )
        return h.hexdigest()


def assign_population(spawn_index: int, n_populations: int) -> int:
    if n_populations < 1:
        raise ValueError("n_populations must be >= 1")
    return spawn_index % n_populations


def spawn_candidates(tile_map: TileMap, cfg: Config) -> np.ndarray:
    """Spawn tiles: open grass with no adjacent water inside the spawn region.

    Falls back to any walkable tile of the region, then of the interior.
    """
    h, w = tile_map.height, tile_map.width
    b = tile_map.border
    region = np.zeros((h, w), dtype=bool)
    if cfg.spawn_region == "border":
        region[b, b : w - b] = True
        region[h - b - 1, b : w - b] = True
        region[b : h - b, b] = True
        region[b : h - b, w - b - 1] = True
    else:
        cy, cx = h // 2, w // 2
        region[cy - 4 : cy + 4, cx - 4 : cx + 4] = True
    terrain = tile_map.terrain
    water = terrain == Terrain.WATER
    near_water = np.zeros_like(water)
    near_water[1:, :] |= water[:-1, :]
    near_water[:-1, :] |= water[1:, :]
    near_water[:, 1:] |= water[:, :-1]
    near_water[:, :-1] |= water[:, 1:]
    walkable = world.WALKABLE[terrain]
    for mask in (
        region & (terrain == Terrain.GRASS) & ~near_water,
        region & walkable,
        tile_map.interior_mask() & walkable,
    ):
        if mask.any():
            return np.argwhere(mask)
    raise AssertionError("map has no walkable tile to spawn on")


def new_world(cfg: Config, seed: int | None = None, tile_map: TileMap | None = None) -> WorldState:
    seed = cfg.seed if seed is None else seed
    if tile_map is None:
        tile_map = world.generate_map(cfg, seed_rng(seed, "map_gen"))
    return WorldState(
        cfg=cfg,
        map=tile_map,
        agents={},
        rng_spawn=seed_rng(seed, "spawning"),
        rng_combat=seed_rng(seed, "combat"),
        spawn_tiles=spawn_candidates(tile_map, cfg),
    )


# ---------------------------------------------------------------------------
# combat formulas


def chebyshev(a: tuple[int, int], b: tuple[int, int]) -> int:
    return max(abs(a[0] - b[0]), abs(a[1] - b[1]))


def style_range(style: Style, cfg: Config) -> int:
    c = cfg.combat
    return (c.melee_range, c.range_range, c.mage_range)[style]


def hit_chance(attack_level: int, defense_level: int, cfg: Config) -> float:
    c = cfg.combat
    p = 0.5 + c.accuracy_slope * (attack_level - defense_level)
    return min(max(p, c.accuracy_floor), c.accuracy_ceiling)


def damage(style: Style, style_level: int, cfg: Config) -> int:
    c = cfg.combat
    base = (c.melee_damage, c.range_damage, c.mage_damage)[style]
    return base + style_level // 5


def attackable(state: WorldState, attacker: AgentState, target: AgentState, style: Style) -> bool:
    cfg = state.cfg
    if attacker.agent_id == target.agent_id:
        return False
    if chebyshev(attacker.pos, target.pos) > style_range(style, cfg):
        return False
    if cfg.attack_rule == "spawn_safety":
        return state.tick - target.spawn_tick >= cfg.spawn_safety_ticks
    unit = cfg.progression.xp_per_level_unit
    gap = abs(overall_level(attacker.skills, unit) - overall_level(target.skills, unit))
    return gap <= cfg.level_range


def resolve_move(state: WorldState, agent: AgentState, direction: Move) -> tuple[int, int]:
    if agent.is_frozen(state.tick):
        return agent.pos
    dr, dc = MOVE_DELTAS[Move(direction)]
    target = (agent.pos[0] + dr, agent.pos[1] + dc)
    if not state.map.in_bounds(target) or not world.PASSABLE[state.map.terrain[target]]:
        return agent.pos
    return target


def resolve_attack(
    state: WorldState,
    attacker: AgentState,
    style: Style,
    target: AgentState,
    rng: np.random.Generator,
    events: TickEvents,
) -> bool:
    """Roll one attack; applies damage, freeze and XP on a hit. Returns whether it hit."""
    cfg = state.cfg
    unit = cfg.progression.xp_per_level_unit
    skill = STYLE_SKILL[style]
    att_level = attacker.skills.level(skill, unit)
    def_level = target.skills.level("defense", unit)
    if rng.random() >= hit_chance(att_level, def_level, cfg):
        events.misses.append({"attacker": attacker.agent_id, "defender": target.agent_id, "style": int(style)})
        return False
    dmg = damage(style, att_level, cfg)
    target.health = max(0, target.health - dmg)
    froze = style == Style.MAGE and cfg.combat.freeze_ticks > 0
    if froze:
        target.frozen_until = state.tick + cfg.combat.freeze_ticks
    xp = dmg * cfg.progression.combat_xp_per_damage
    grant_xp(attacker.skills, skill, xp, cfg.xp_scale)
    grant_xp(target.skills, "defense", xp, cfg.xp_scale)
    grant_xp(attacker.skills, "constitution", xp / 2, cfg.xp_scale)
    grant_xp(target.skills, "constitution", xp / 2, cfg.xp_scale)
    events.hits.append(
        {
            "attacker": attacker.agent_id,
            "defender": target.agent_id,
            "style": int(style),
            "damage": dmg,
            "froze": froze,
        }
    )
    return True


# ---------------------------------------------------------------------------
# resources


def near_water(tile_map: TileMap, pos: tuple[int, int]) -> bool:
    r, c = pos
    for dr, dc in NEIGHBORS4:
        q = (r + dr, c + dc)
        if tile_map.in_bounds(q) and tile_map.terrain[q] == Terrain.WATER:
            return True
    return False


def forage_step(state: WorldState, agent: AgentState, events: TickEvents | None = None) -> dict[str, int]:
    cfg = state.cfg
    prog = cfg.progression
    unit = prog.xp_per_level_unit
    gained = {"food": 0, "water": 0}
    if world.consume_forest(state.map, agent.pos, cfg.forest_regen_ticks):
        gain = prog.forage_food_gain + agent.skills.level("hunting", unit) - 1
        gained["food"] = max(0, min(gain, food_cap(agent.skills, cfg) - agent.food))
        agent.food += gained["food"]
        grant_xp(agent.skills, "hunting", prog.forage_xp, cfg.xp_scale)
    if near_water(state.map, agent.pos):
        gain = prog.forage_water_gain + agent.skills.level("fishing", unit) - 1
        gained["water"] = max(0, min(gain, water_cap(agent.skills, cfg) - agent.water))
        agent.water += gained["water"]
        grant_xp(agent.skills, "fishing", prog.forage_xp, cfg.xp_scale)
    if events is not None and (gained["food"] or gained["water"]):
        events.forages.append({"agent": agent.agent_id, **gained})
    return gained


def survival_step(agent: AgentState, cfg: Config) -> dict[str, int]:
    """Hunger, thirst, starvation damage and regeneration for one tick. Returns the upkeep paid."""
    paid_food = min(1, agent.food)
    paid_water = min(1, agent.water)
    agent.food -= paid_food
    agent.water -= paid_water
    starving = (agent.food == 0) + (agent.water == 0)
    agent.health = max(0, agent.health - cfg.starvation_rate * starving)
    if agent.food > cfg.food_max / 2 and agent.water > cfg.water_max / 2:
        agent.health = min(agent.health + cfg.regen_rate, max_health(agent.skills, cfg))
    return {"food": paid_food, "water": paid_water}


def apply_deaths(
    state: WorldState, dying: dict[int, tuple[str, int | None]], events: TickEvents
) -> dict[int, float]:
    """Remove dying agents, transferring combat victims' food and water to their killers."""
    rewards: dict[int, float] = {}
    cfg = state.cfg
    for aid in sorted(dying):
        cause, killer_id = dying[aid]
        victim = state.agents[aid]
        events.deaths.append(
            {
                "agent": aid,
                "cause": cause,
                "killer": killer_id,
                "food": victim.food,
                "water": victim.water,
                "lifetime": state.tick - victim.spawn_tick,
            }
        )
        if cause == "combat" and killer_id is not None and killer_id not in dying and killer_id in state.agents:
            killer = state.agents[killer_id]
            take_food = min(victim.food, max(0, food_cap(killer.skills, cfg) - killer.food))
            take_water = min(victim.water, max(0, water_cap(killer.skills, cfg) - killer.water))
            killer.food += take_food
            killer.water += take_water
            events.pilfers.append(
                {
                    "from": aid,
                    "to": killer_id,
                    "food": take_food,
                    "water": take_water,
                    "food_discarded": victim.food - take_food,
                    "water_discarded": victim.water - take_water,
                }
            )
        victim.alive = False
        del state.agents[aid]
        rewards[aid] = -1.0
    return rewards


def spawn_step(state: WorldState, events: TickEvents) -> AgentState | None:
    cfg = state.cfg
    if len(state.agents) >= cfg.spawn_cap:
        return None
    r, c = state.spawn_tiles[state.rng_spawn.integers(len(state.spawn_tiles))]
    population = assign_population(state.spawn_count, cfg.n_populations)
    agent = spawn_agent(state.next_agent_id, population, (int(r), int(c)), state.tick, cfg)
    state.agents[agent.agent_id] = agent
    state.next_agent_id += 1
    state.spawn_count += 1
    events.spawns.append(
        {
            "agent": agent.agent_id,
            "population": population,
            "pos": list(agent.pos),
            "food": agent.food,
            "water": agent.water,
            "health": agent.health,
        }
    )
    return agent


# ---------------------------------------------------------------------------
# tick


def step(
    state: WorldState, actions: dict[int, ActionBundle] | None = None
) -> tuple[WorldState, TickEvents, dict[int, float]]:
    """Advance the world one tick in place.

    Returns the state, the tick's events, and a reward for every agent alive at the
    start of the tick (-1 for agents that died, 0 otherwise).
    """
    actions = actions or {}
    events = TickEvents(tick=state.tick)
    cfg = state.cfg
    tmap = state.map

    for aid in sorted(actions):
        if aid not in state.agents:
            events.warnings.append({"kind": "unknown_agent", "agent": aid})
    order = sorted(state.agents)
    rewards = {aid: 0.0 for aid in order}

    # 2. movement
    for aid in order:
        agent = state.agents[aid]
        bundle = actions.get(aid, IDLE)
        dest = resolve_move(state, agent, bundle.move)
        if dest != agent.pos:
            events.moves.append({"agent": aid, "from": list(agent.pos), "to": list(dest)})
            agent.pos = dest

    on_lava = {aid for aid in order if world.LETHAL[tmap.terrain[state.agents[aid].pos]]}

    # 3. combat
    killer: dict[int, int] = {}
    for aid in order:
        bundle = actions.get(aid, IDLE)
        if bundle.attack is None:
            continue
        attacker = state.agents[aid]
        if attacker.health <= 0 or aid in on_lava:
            continue
        target = state.agents.get(bundle.attack.target)
        if target is None or target.health <= 0 or target.agent_id in on_lava:
            events.warnings.append({"kind": "invalid_target", "agent": aid, "target": bundle.attack.target})
            continue
        style = Style(bundle.attack.style)
        if not attackable(state, attacker, target, style):
            events.warnings.append({"kind": "not_attackable", "agent": aid, "target": target.agent_id})
            continue
        if resolve_attack(state, attacker, style, target, state.rng_combat, events) and target.health <= 0:
            killer[target.agent_id] = aid

    active = [aid for aid in order if aid not in on_lava and state.agents[aid].health > 0]

    # 4. foraging
    for aid in active:
        forage_step(state, state.agents[aid], events)

    # 5. survival
    for aid in active:
        paid = survival_step(state.agents[aid], cfg)
        if paid["food"] or paid["water"]:
            events.upkeep.append({"agent": aid, **paid})

    # 6. deaths
    dying: dict[int, tuple[str, int | None]] = {}
    for aid in order:
        agent = state.agents[aid]
        if aid in on_lava:
            dying[aid] = ("lava", None)
        elif aid in killer:
            dying[aid] = ("combat", killer[aid])
        elif agent.health <= 0:
            dying[aid] = ("starvation", None)
    rewards.update(apply_deaths(state, dying, events))

    # 7-9
    spawn_step(state, events)
    world.tick_tiles(tmap)
    state.tick += 1
    return state, events, rewards


def total_resources(state: WorldState) -> tuple[int, int]:
    agents = state.agents.values()
    return sum(a.food for a in agents), sum(a.water for a in agents)


def ledger_delta(events: TickEvents) -> tuple[int, int]:
    """Net food/water change implied by a tick's events (spawn + forage + pilfer - upkeep - death)."""
    food = water = 0
    for e in events.spawns:
        food += e["food"]
        water += e["water"]
    for e in events.forages:
        food += e["food"]
        water += e["water"]
    for e in events.pilfers:
        food += e["food"]
        water += e["water"]
    for e in events.upkeep:
        food -= e["food"]
        water -= e["water"]
    for e in events.deaths:
        food -= e["food"]
        water -= e["water"]
    return food, water
