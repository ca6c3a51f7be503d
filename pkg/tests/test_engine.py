import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import OPEN_5x5, hand_world
from mmoforge.agents import Skills
from mmoforge.config import default_config
from mmoforge.engine import (
    IDLE,
    ActionBundle,
    Attack,
    Move,
    Style,
    TickEvents,
    apply_deaths,
    assign_population,
    attackable,
    damage,
    forage_step,
    hit_chance,
    ledger_delta,
    new_world,
    resolve_attack,
    resolve_move,
    spawn_step,
    step,
    survival_step,
    total_resources,
)
from mmoforge.world import Terrain


def _xp(level):
    return 100.0 * (level - 1) ** 2


# ---------------------------------------------------------------------------
# survival


def _idle_death_tick(food, water, health, food_max=10, water_max=10):
    """Oracle: iterate the upkeep rules on plain integers."""
    t = 0
    while True:
        t += 1
        food, water = max(0, food - 1), max(0, water - 1)
        health -= (food == 0) + (water == 0)
        if food > food_max / 2 and water > water_max / 2:
            health = min(health + 1, 10)
        if health <= 0:
            return t


def test_survival_oracle_says_fourteen():
    assert _idle_death_tick(10, 10, 10) == 14


def test_idle_agent_starves_at_tick_fourteen():
    cfg = default_config().replace(spawn_cap=1)
    state = new_world(cfg, seed=3)
    deaths = []
    for _ in range(20):
        _, events, rewards = step(state, {})
        deaths += [(events.tick, d) for d in events.deaths]
    tick, d = deaths[0]
    assert tick == 14 and d["cause"] == "starvation" and d["lifetime"] == 14


@pytest.mark.parametrize(
    "before,after",
    [((10, 10, 5), (9, 9, 6)), ((6, 6, 5), (5, 5, 5)), ((1, 5, 5), (0, 4, 4)), ((0, 0, 3), (0, 0, 1))],
)
def test_survival_step(before, after):
    state = hand_world(OPEN_5x5, agents=[(3, 3)])
    a = state.agents[0]
    a.food, a.water, a.health = before
    survival_step(a, state.cfg)
    assert (a.food, a.water, a.health) == after


def test_stay_with_full_resources():
    state = hand_world(OPEN_5x5, agents=[(3, 3)])
    _, _, rewards = step(state, {0: IDLE})
    a = state.agents[0]
    assert rewards == {0: 0.0}
    assert a.health == 10 and (a.food, a.water) == (9, 9)


# ---------------------------------------------------------------------------
# movement


def test_moves():
    rows = ["LLLLL", "LGRGL", "LGGGL", "LLLLL"]
    state = hand_world(rows, agents=[(2, 2)])
    a = state.agents[0]
    assert resolve_move(state, a, Move.WEST) == (2, 1)
    assert resolve_move(state, a, Move.NORTH) == (2, 2)  # stone
    assert resolve_move(state, a, Move.STAY) == (2, 2)
    a.frozen_until = state.tick
    assert resolve_move(state, a, Move.WEST) == (2, 2)


def test_lava_kills():
    state = hand_world(OPEN_5x5, agents=[(1, 1)])
    _, events, rewards = step(state, {0: ActionBundle(Move.NORTH)})
    assert events.deaths[0]["cause"] == "lava"
    assert rewards[0] == -1.0
    assert 0 not in state.agents


def test_water_blocks():
    rows = ["LLLLL", "LGWGL", "LLLLL"]
    state = hand_world(rows, agents=[(1, 1)])
    assert resolve_move(state, state.agents[0], Move.EAST) == (1, 1)


# ---------------------------------------------------------------------------
# combat rules


def test_spawn_safety():
    state = hand_world(OPEN_5x5, agents=[(3, 3), (3, 4)], tick=10)
    a, b = state.agents[0], state.agents[1]
    b.spawn_tick = 7
    assert not attackable(state, a, b, Style.MELEE)
    b.spawn_tick = 10 - 15
    assert attackable(state, a, b, Style.MELEE)
    assert not attackable(state, a, a, Style.MELEE)


def test_level_range():
    cfg = default_config().replace(attack_rule="level_range", spawn_cap=2, border_thickness=1)
    state = hand_world(OPEN_5x5, cfg=cfg, agents=[(3, 3), (3, 4)])
    a, b = state.agents[0], state.agents[1]
    b.skills = Skills(**{k: _xp(9) for k in ("constitution", "melee", "range", "mage", "defense")})
    assert not attackable(state, a, b, Style.MELEE)
    for s in (a, b):
        s.skills = Skills(**{k: _xp(4) for k in ("constitution", "melee", "range", "mage", "defense")})
    assert attackable(state, a, b, Style.MELEE)


@pytest.mark.parametrize("style,reach", [(Style.MELEE, 1), (Style.RANGE, 3), (Style.MAGE, 4)])
def test_chebyshev_reach(style, reach):
    rows = ["L" * 9] + ["L" + "G" * 7 + "L" for _ in range(7)] + ["L" * 9]
    state = hand_world(rows, agents=[(1, 1), (1 + reach, 1 + reach)])
    a, b = state.agents[0], state.agents[1]
    assert attackable(state, a, b, style)
    b.pos = (1 + reach + 1, 1)
    assert not attackable(state, a, b, style)


@pytest.mark.parametrize("att,dfn,p", [(5, 5, 0.5), (10, 1, 0.95), (1, 20, 0.1), (3, 1, 0.6)])
def test_hit_chance(att, dfn, p):
    assert hit_chance(att, dfn, default_config()) == pytest.approx(p)


@pytest.mark.parametrize("style,level,dmg", [(Style.MELEE, 1, 3), (Style.MAGE, 1, 1), (Style.RANGE, 10, 4)])
def test_damage(style, level, dmg):
    assert damage(style, level, default_config()) == dmg


def test_range_and_melee_hit_harder_than_mage():
    cfg = default_config()
    assert damage(Style.MELEE, 1, cfg) > damage(Style.MAGE, 1, cfg)
    assert damage(Style.RANGE, 1, cfg) > damage(Style.MAGE, 1, cfg)


class _Fixed:
    def __init__(self, value):
        self.value = value

    def random(self):
        return self.value


def test_mage_hit_freezes_and_grants_xp():
    state = hand_world(OPEN_5x5, agents=[(3, 3), (3, 5)])
    a, b = state.agents[0], state.agents[1]
    ev = TickEvents(state.tick)
    assert resolve_attack(state, a, Style.MAGE, b, _Fixed(0.0), ev)
    assert b.health == 9 and b.frozen_until == state.tick + 3
    assert a.skills.mage == 10 and b.skills.defense == 10
    assert a.skills.constitution == 5 and b.skills.constitution == 5
    for t in range(1, 4):
        state.tick += 1
        assert resolve_move(state, b, Move.WEST) == b.pos, t
    state.tick += 1
    assert resolve_move(state, b, Move.WEST) != b.pos


def test_miss_changes_nothing():
    state = hand_world(OPEN_5x5, agents=[(3, 3), (3, 4)])
    a, b = state.agents[0], state.agents[1]
    ev = TickEvents(state.tick)
    assert not resolve_attack(state, a, Style.MELEE, b, _Fixed(0.99), ev)
    assert b.health == 10 and b.skills.defense == 0 and len(ev.misses) == 1


def test_frozen_agent_can_attack():
    state = hand_world(OPEN_5x5, agents=[(3, 3), (3, 4)])
    state.agents[0].frozen_until = state.tick + 5
    _, events, _ = step(state, {0: ActionBundle(Move.STAY, Attack(Style.MELEE, 1))})
    assert len(events.hits) + len(events.misses) == 1


def test_attack_on_unknown_agent_is_warning():
    state = hand_world(OPEN_5x5, agents=[(3, 3)])
    _, events, _ = step(state, {0: ActionBundle(Move.STAY, Attack(Style.MELEE, 42)), 9: IDLE})
    kinds = {w["kind"] for w in events.warnings}
    assert kinds == {"invalid_target", "unknown_agent"}


def test_combat_kill_pilfers():
    state = hand_world(OPEN_5x5, agents=[(3, 3), (3, 4)])
    killer, victim = state.agents[0], state.agents[1]
    victim.health, victim.food, victim.water = 1, 4, 2
    killer.food, killer.water = 3, 3
    state.rng_combat = _Fixed(0.0)
    _, events, rewards = step(state, {0: ActionBundle(Move.STAY, Attack(Style.MELEE, 1))})
    assert events.deaths[0]["cause"] == "combat" and rewards[1] == -1.0 and rewards[0] == 0.0
    p = events.pilfers[0]
    # a victim already at 0 health skips upkeep; the killer pays 1/1 before collecting
    assert (p["food"], p["water"]) == (4, 2)
    assert (killer.food, killer.water) == (2 + 4, 2 + 2)


def test_pilfer_overflow_discarded():
    state = hand_world(OPEN_5x5, agents=[(3, 3), (3, 4)])
    ev = TickEvents(state.tick)
    state.agents[1].food, state.agents[1].water = 4, 2
    state.agents[0].food = 10
    apply_deaths(state, {1: ("combat", 0)}, ev)
    p = ev.pilfers[0]
    assert p["food"] == 0 and p["food_discarded"] == 4 and p["water"] == 0 and p["water_discarded"] == 2


def test_starvation_death_has_no_pilfer():
    state = hand_world(OPEN_5x5, agents=[(3, 3)])
    ev = TickEvents(state.tick)
    rewards = apply_deaths(state, {0: ("starvation", None)}, ev)
    assert ev.pilfers == [] and rewards == {0: -1.0}


# ---------------------------------------------------------------------------
# foraging


def test_forage_food():
    rows = ["LLLLL", "LGFGL", "LGGGL", "LLLLL"]
    state = hand_world(rows, agents=[(1, 2)])
    a = state.agents[0]
    a.food = 3
    forage_step(state, a)
    assert a.food == 8 and state.map.terrain[1, 2] == Terrain.SCRUB and a.skills.hunting == 10


def test_forage_at_cap_still_consumes():
    rows = ["LLLLL", "LGFGL", "LGGGL", "LLLLL"]
    state = hand_world(rows, agents=[(1, 2)])
    gained = forage_step(state, state.agents[0])
    assert gained["food"] == 0 and state.agents[0].food == 10
    assert state.map.terrain[1, 2] == Terrain.SCRUB


def test_forage_water_adjacent():
    rows = ["LLLLL", "LGWGL", "LGGGL", "LLLLL"]
    state = hand_world(rows, agents=[(2, 2)])
    a = state.agents[0]
    a.water = 0
    forage_step(state, a)
    assert a.water == 5 and state.map.terrain[1, 2] == Terrain.WATER


def test_diagonal_water_does_not_count():
    rows = ["LLLLL", "LWGGL", "LGGGL", "LLLLL"]
    state = hand_world(rows, agents=[(2, 2)])
    state.agents[0].water = 0
    forage_step(state, state.agents[0])
    assert state.agents[0].water == 0


# ---------------------------------------------------------------------------
# spawning


def test_spawn_when_empty():
    state = new_world(default_config(), seed=1)
    _, events, _ = step(state, {})
    assert len(events.spawns) == 1


def test_cap_blocks_spawn():
    cfg = default_config().replace(spawn_cap=2, border_thickness=1)
    state = hand_world(OPEN_5x5, cfg=cfg, agents=[(3, 3)])
    assert spawn_step(state, TickEvents(0)) is not None
    assert spawn_step(state, TickEvents(0)) is None


def test_round_robin_populations():
    assert [assign_population(i, 8) for i in range(10)] == [0, 1, 2, 3, 4, 5, 6, 7, 0, 1]
    state = new_world(default_config(), seed=2)
    pops = []
    for _ in range(10):
        _, ev, _ = step(state, {})
        pops += [s["population"] for s in ev.spawns]
    assert pops == [0, 1, 2, 3, 4, 5, 6, 7, 0, 1]


def test_border_spawns_on_inner_ring():
    cfg = default_config()
    state = new_world(cfg, seed=5)
    b = cfg.border_thickness
    h, w = state.map.terrain.shape
    for r, c in state.spawn_tiles:
        assert r in (b, h - b - 1) or c in (b, w - b - 1)
        assert state.map.terrain[r, c] == Terrain.GRASS


def test_center_spawns_in_block():
    cfg = default_config().replace(spawn_region="center")
    state = new_world(cfg, seed=5)
    h, w = state.map.terrain.shape
    assert np.all(np.abs(state.spawn_tiles[:, 0] - h // 2) <= 4)
    assert np.all(np.abs(state.spawn_tiles[:, 1] - w // 2) <= 4)


# ---------------------------------------------------------------------------
# whole-tick properties


def _random_actions(state, rng):
    ids = sorted(state.agents)
    out = {}
    for aid in ids:
        attack = None
        if rng.random() < 0.5 and len(ids) > 1:
            attack = Attack(Style(int(rng.integers(3))), int(rng.choice(ids)))
        out[aid] = ActionBundle(Move(int(rng.integers(5))), attack)
    return out


@settings(max_examples=8, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_fuzz_invariants(seed):
    from mmoforge.agents import food_cap, max_health, water_cap

    cfg = default_config().replace(map_width=24, map_height=24, spawn_cap=24, spawn_safety_ticks=0)
    state = new_world(cfg, seed=seed)
    rng = np.random.default_rng(seed)
    for _ in range(150):
        before = total_resources(state)
        xp_before = {aid: vars(a.skills).copy() for aid, a in state.agents.items()}
        _, events, rewards = step(state, _random_actions(state, rng))
        assert len(state.agents) <= cfg.spawn_cap
        assert sum(rewards.values()) == -len(events.deaths)
        df, dw = ledger_delta(events)
        after = total_resources(state)
        assert (before[0] + df, before[1] + dw) == after
        for e in events.pilfers:
            assert any(d["agent"] == e["from"] for d in events.deaths)
        for aid, a in state.agents.items():
            assert 0 <= a.food <= food_cap(a.skills, cfg)
            assert 0 <= a.water <= water_cap(a.skills, cfg)
            assert 0 < a.health <= max_health(a.skills, cfg)
            assert state.map.in_bounds(a.pos)
            for k, v in xp_before.get(aid, {}).items():
                assert getattr(a.skills, k) >= v


def test_same_seed_same_hashes():
    def run():
        cfg = default_config().replace(map_width=24, map_height=24)
        state = new_world(cfg, seed=11)
        rng = np.random.default_rng(0)
        out = []
        for _ in range(100):
            step(state, _random_actions(state, rng))
            out.append(state.state_hash())
        return out

    assert run() == run()


def test_tick_strictly_increases():
    state = new_world(default_config(), seed=0)
    ticks = [step(state, {})[1].tick for _ in range(5)]
    assert ticks == [0, 1, 2, 3, 4] and state.tick == 5
