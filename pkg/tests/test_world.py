import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmoforge.config import default_config, seed_rng
from mmoforge.world import (
    LETHAL,
    PASSABLE,
    MapGenerationError,
    Terrain,
    TileMap,
    classify_tile,
    consume_forest,
    generate_map,
    gradient_noise,
    is_lethal,
    passable,
    ridge_noise,
    tick_tiles,
    _permutation,
)


def _scalar_gradient_noise(x: float, y: float, perm) -> float:
    """Textbook Perlin evaluation one point at a time, as an oracle for the vectorized version."""
    grads = [(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (-1, 1), (1, -1), (-1, -1)]
    x0, y0 = int(np.floor(x)), int(np.floor(y))
    fx, fy = x - x0, y - y0

    def dot(dx, dy):
        h = perm[perm[(x0 + dx) & 255] + ((y0 + dy) & 255)] & 7
        gx, gy = grads[h]
        n = (gx * gx + gy * gy) ** 0.5
        return (gx * (fx - dx) + gy * (fy - dy)) / n

    def fade(t):
        return t * t * t * (t * (t * 6 - 15) + 10)

    u, v = fade(fx), fade(fy)
    top = dot(0, 0) + u * (dot(1, 0) - dot(0, 0))
    bottom = dot(0, 1) + u * (dot(1, 1) - dot(0, 1))
    return top + v * (bottom - top)


def test_vectorized_noise_matches_scalar_oracle():
    perm = _permutation(11)
    rng = np.random.default_rng(0)
    pts = rng.uniform(-40, 40, size=(200, 2))
    fast = gradient_noise(pts[:, 0], pts[:, 1], perm)
    from mmoforge.world import _NOISE_GAIN

    slow = np.clip([_scalar_gradient_noise(x, y, perm) * _NOISE_GAIN for x, y in pts], -1, 1)
    np.testing.assert_allclose(fast, slow, atol=1e-12)


@pytest.mark.parametrize("x,y", [(0, 0), (16, 32), (-48, 160), (320, 16)])
def test_ridge_is_one_on_lattice(x, y):
    # scale 16: multiples of 16 are lattice points
    assert ridge_noise(x, y, octaves=1, scale=16, rng_seed=5) == 1.0


def test_ridge_deterministic():
    assert ridge_noise(3.3, 9.1, rng_seed=4) == ridge_noise(3.3, 9.1, rng_seed=4)


def test_ridge_range_over_samples():
    rng = np.random.default_rng(1)
    xy = rng.uniform(0, 500, size=(2, 10_000))
    r = ridge_noise(xy[0], xy[1], octaves=3, scale=16, rng_seed=9)
    assert r.min() >= 0 and r.max() <= 1
    assert r.max() - r.min() > 0.5


def test_ridge_bounded_large_sample():
    rng = np.random.default_rng(2)
    xy = rng.uniform(-1e4, 1e4, size=(2, 100_000))
    r = ridge_noise(xy[0], xy[1], octaves=4, scale=7.5, rng_seed=123)
    assert np.all((r >= 0) & (r <= 1))


def test_ridge_continuous():
    a = ridge_noise(10.0, 10.0, rng_seed=3)
    b = ridge_noise(10.0 + 1e-7, 10.0, rng_seed=3)
    assert abs(a - b) < 1e-5


def test_ridge_rejects_bad_parameters():
    with pytest.raises(ValueError):
        ridge_noise(0, 0, octaves=0)
    with pytest.raises(ValueError):
        ridge_noise(0, 0, scale=0)


@pytest.mark.parametrize(
    "r,terrain",
    [(0.0, Terrain.WATER), (0.24, Terrain.WATER), (0.25, Terrain.GRASS), (0.60, Terrain.FOREST),
     (0.75, Terrain.GRASS), (0.85, Terrain.STONE), (0.99, Terrain.STONE)],
)
def test_classify(r, terrain):
    assert classify_tile(r) == terrain


def test_classify_rejects_unordered():
    with pytest.raises(ValueError):
        classify_tile(0.5, (0.5, 0.4, 0.7, 0.9))


def test_generate_map_deterministic_and_bordered():
    cfg = default_config()
    a = generate_map(cfg, seed_rng(7, "map_gen"))
    b = generate_map(cfg, seed_rng(7, "map_gen"))
    assert np.array_equal(a.terrain, b.terrain)
    b_ = cfg.border_thickness
    ring = ~a.interior_mask()
    assert np.all(a.terrain[ring] == Terrain.LAVA)
    assert a.terrain.shape == (cfg.map_height + 2 * b_, cfg.map_width + 2 * b_)
    interior = a.interior()
    assert (interior == Terrain.FOREST).sum() >= 1
    assert (interior == Terrain.WATER).sum() >= 1
    assert not (interior == Terrain.LAVA).any()


def test_generation_gives_up_with_diagnostics():
    # a forest band this thin essentially never contains a tile
    cfg = default_config().replace(
        t_forest_lo=0.99990, t_forest_hi=0.99991, t_stone=0.99992, map_width=15, map_height=15
    )
    with pytest.raises(MapGenerationError, match="retries"):
        generate_map(cfg, seed_rng(0, "map_gen"))


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**32))
def test_generated_maps_satisfy_invariants(seed):
    cfg = default_config().replace(map_width=32, map_height=32)
    m = generate_map(cfg, seed_rng(seed, "map_gen"))
    assert np.all(m.terrain[~m.interior_mask()] == Terrain.LAVA)
    assert (m.interior() == Terrain.FOREST).any() and (m.interior() == Terrain.WATER).any()
    assert np.array_equal(m.terrain, generate_map(cfg, seed_rng(seed, "map_gen")).terrain)


def _tiny_map(rows: list[str]) -> TileMap:
    return TileMap.from_text(f"{len(rows[0])} {len(rows)}\n" + "\n".join(rows), border=0)


def test_consume_forest_cycle():
    m = _tiny_map(["FG", "GG"])
    assert consume_forest(m, (0, 0), 15)
    assert m.terrain[0, 0] == Terrain.SCRUB and m.regen[0, 0] == 15
    assert not consume_forest(m, (0, 0), 15)
    assert not consume_forest(m, (0, 1), 15)
    assert m.terrain[0, 1] == Terrain.GRASS and m.regen[0, 1] == 0


def test_consume_out_of_bounds():
    with pytest.raises(IndexError):
        consume_forest(_tiny_map(["F"]), (3, 0))


def test_regrowth_after_counter():
    m = _tiny_map(["FG"])
    consume_forest(m, (0, 0), 15)
    for i in range(14):
        tick_tiles(m)
        assert m.terrain[0, 0] == Terrain.SCRUB, i
    tick_tiles(m)
    assert m.terrain[0, 0] == Terrain.FOREST and m.regen[0, 0] == 0


def test_scrub_counter_one_flips():
    m = _tiny_map(["S"])
    m.regen[0, 0] = 1
    tick_tiles(m)
    assert m.terrain[0, 0] == Terrain.FOREST


def test_tick_without_scrub_is_noop():
    m = _tiny_map(["GFW", "RLG"])
    before = m.copy()
    tick_tiles(m)
    assert np.array_equal(m.terrain, before.terrain) and np.array_equal(m.regen, before.regen)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(st.sampled_from(list(Terrain)), min_size=4, max_size=4), min_size=3, max_size=3),
       st.lists(st.integers(1, 20), min_size=12, max_size=12))
def test_tick_only_turns_scrub_into_forest(grid, counters):
    terrain = np.array(grid, dtype=np.int8)
    regen = np.where(terrain == Terrain.SCRUB, np.array(counters).reshape(3, 4), 0).astype(np.int16)
    m = TileMap(terrain.copy(), regen.copy(), 0)
    tick_tiles(m)
    assert m.terrain.shape == terrain.shape
    changed = m.terrain != terrain
    assert np.all(terrain[changed] == Terrain.SCRUB) and np.all(m.terrain[changed] == Terrain.FOREST)
    assert np.all((m.regen > 0) == (m.terrain == Terrain.SCRUB))


@pytest.mark.parametrize(
    "ch,walk,lethal",
    [("R", False, False), ("W", False, False), ("L", True, True), ("G", True, False), ("F", True, False),
     ("S", True, False)],
)
def test_passability(ch, walk, lethal):
    m = _tiny_map([ch])
    assert passable(m, (0, 0)) is walk
    assert is_lethal(m, (0, 0)) is lethal


def test_passability_tables_agree():
    assert PASSABLE[Terrain.LAVA] and LETHAL[Terrain.LAVA]
    assert LETHAL.sum() == 1


def test_text_round_trip(tmp_path):
    m = generate_map(default_config().replace(map_width=16, map_height=16), seed_rng(1, "map_gen"))
    p = tmp_path / "m.map"
    m.save(p)
    assert p.read_text().splitlines()[0] == f"{m.width} {m.height}"
    again = TileMap.load(p, m.border)
    assert np.array_equal(again.terrain, m.terrain)


def test_text_dimension_mismatch():
    with pytest.raises(ValueError):
        TileMap.from_text("3 2\nGGG\nGG\n", 0)
