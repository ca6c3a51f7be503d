import pytest

from mmoforge.config import default_config


@pytest.fixture
def cfg():
    return default_config()


@pytest.fixture
def small_cfg():
    """Small map, two populations, narrow network: fast enough for per-test worlds."""
    return small_config()


def small_config():
    return default_config().replace(map_width=20, map_height=20, n_populations=2, embed_dim=8, hidden_dim=16)


def hand_world(rows: list[str], cfg=None, agents=(), tick: int = 100, seed: int = 0):
    """World over a literal map (border of width 1 expected in ``rows``) with agents placed by hand.

    ``agents`` holds ``(row, col)`` positions or ``(row, col, population)``. Spawning is
    disabled by setting the cap to the agent count unless ``cfg`` overrides it.
    """
    from mmoforge.agents import spawn_agent
    from mmoforge.engine import new_world
    from mmoforge.world import TileMap

    tile_map = TileMap.from_text(f"{len(rows[0])} {len(rows)}\n" + "\n".join(rows), border=1)
    cfg = cfg or default_config().replace(spawn_cap=max(1, len(agents)), border_thickness=1)
    state = new_world(cfg, seed=seed, tile_map=tile_map)
    state.tick = tick
    for i, a in enumerate(agents):
        pop = a[2] if len(a) > 2 else 0
        state.agents[i] = spawn_agent(i, pop, (a[0], a[1]), 0, cfg)
    state.next_agent_id = len(agents)
    state.spawn_count = len(agents)
    return state


OPEN_5x5 = [
    "LLLLLLL",
    "LGGGGGL",
    "LGGGGGL",
    "LGGGGGL",
    "LGGGGGL",
    "LGGGGGL",
    "LLLLLLL",
]
