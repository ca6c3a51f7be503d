"""Observation schema, per-agent extraction, normalization and the binary wire codec.

Wire layout (little-endian)::

    u32  payload length (bytes after this field)
    u8   schema version (1)
    u16  tile entity count
    u16  agent entity count
    tile entities, then agent entities; per entity, attributes in schema order,
    discrete as i16 and continuous as f32
"""

from __future__ import annotations

import functools
import struct
from dataclasses import dataclass, field

import numpy as np

from .agents import overall_level
from .config import Config
from .engine import WorldState
from .world import Terrain

SCHEMA_VERSION = 1
HEADER = struct.Struct("<IBHH")


class ObservationError(ValueError):
    pass


@dataclass(frozen=True)
class Discrete:
    min: int
    max: int

    @property
    def size(self) -> int:
        return self.max - self.min + 1


@dataclass(frozen=True)
class Continuous:
    mean: float
    std: float


@dataclass(frozen=True)
class AttributeSpec:
    name: str
    kind: Discrete | Continuous

    @property
    def discrete(self) -> bool:
        return isinstance(self.kind, Discrete)


@dataclass(frozen=True)
class Schema:
    tile: tuple[AttributeSpec, ...]
    agent: tuple[AttributeSpec, ...]
    crop: int
    agent_cap: int
    version: int = SCHEMA_VERSION

    @property
    def n_tiles(self) -> int:
        return self.crop * self.crop

    def entity(self, kind: str) -> tuple[AttributeSpec, ...]:
        return self.tile if kind == "tile" else self.agent

    @functools.cached_property
    def _dtypes(self) -> dict[str, np.dtype]:
        # hashing the spec tuples on every decode was a measurable share of training time
        return {"tile": _wire_dtype(self.tile), "agent": _wire_dtype(self.agent)}

    def wire_dtype(self, kind: str) -> np.dtype:
        return self._dtypes["tile" if kind == "tile" else "agent"]

    def wire_size(self, n_agents: int) -> int:
        return (
            HEADER.size
            + self.n_tiles * self.wire_dtype("tile").itemsize
            + n_agents * self.wire_dtype("agent").itemsize
        )


@functools.lru_cache(maxsize=64)
def _wire_dtype(specs: tuple[AttributeSpec, ...]) -> np.dtype:
    return np.dtype([(a.name, "<i2" if a.discrete else "<f4") for a in specs])


def build_schema(cfg: Config) -> Schema:
    r = cfg.obs_crop // 2
    offset = Discrete(-r, r)
    tile = (
        AttributeSpec("terrain", Discrete(0, len(Terrain) - 1)),
        AttributeSpec("has_forest_food", Discrete(0, 1)),
        AttributeSpec("drow", offset),
        AttributeSpec("dcol", offset),
    )
    agent = (
        AttributeSpec("drow", offset),
        AttributeSpec("dcol", offset),
        AttributeSpec("food", Continuous(cfg.food_max / 2, cfg.food_max / 4)),
        AttributeSpec("water", Continuous(cfg.water_max / 2, cfg.water_max / 4)),
        AttributeSpec("health", Continuous(cfg.health_max / 2, cfg.health_max / 4)),
        AttributeSpec("level", Continuous(5.0, 5.0)),
        AttributeSpec("frozen", Discrete(0, 1)),
        AttributeSpec("is_self", Discrete(0, 1)),
        AttributeSpec("population", Discrete(0, cfg.n_populations - 1)),
        AttributeSpec("same_population", Discrete(0, 1)),
    )
    return Schema(tile=tile, agent=agent, crop=cfg.obs_crop, agent_cap=cfg.obs_agent_cap)


# Column indices into the agent attribute rows.
A_DROW, A_DCOL, A_FOOD, A_WATER, A_HEALTH, A_LEVEL, A_FROZEN, A_SELF, A_POP, A_SAME = range(10)
T_TERRAIN, T_FOOD, T_DROW, T_DCOL = range(4)


@dataclass(eq=False)
class Observation:
    """Attribute rows per entity type. Discrete values are stored as exact floats."""

    tiles: np.ndarray  # (crop*crop, n_tile_attrs) float32
    agents: np.ndarray  # (n, n_agent_attrs) float32, observer first
    agent_ids: tuple[int, ...] | None = field(default=None)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Observation):
            return NotImplemented
        return (
            self.tiles.shape == other.tiles.shape
            and self.agents.shape == other.agents.shape
            and bool(np.array_equal(self.tiles, other.tiles))
            and bool(np.array_equal(self.agents, other.agents))
        )

    @property
    def n_agents(self) -> int:
        return self.agents.shape[0]

    def terrain_grid(self) -> np.ndarray:
        crop = int(round(np.sqrt(self.tiles.shape[0])))
        return self.tiles[:, T_TERRAIN].astype(np.int64).reshape(crop, crop)


def normalize(value: float, spec: AttributeSpec | Discrete | Continuous) -> float:
    kind = spec.kind if isinstance(spec, AttributeSpec) else spec
    if isinstance(kind, Continuous):
        return (value - kind.mean) / kind.std
    if not kind.min <= value <= kind.max:
        raise ObservationError(f"discrete value {value} outside [{kind.min}, {kind.max}]")
    return value


def validate(obs: Observation, schema: Schema) -> None:
    if obs.tiles.shape != (schema.n_tiles, len(schema.tile)):
        raise ObservationError(f"tile block has shape {obs.tiles.shape}")
    n = obs.agents.shape[0]
    if obs.agents.ndim != 2 or obs.agents.shape[1] != len(schema.agent):
        raise ObservationError(f"agent block has shape {obs.agents.shape}")
    if not 1 <= n <= schema.agent_cap:
        raise ObservationError(f"agent entity count {n} outside [1, {schema.agent_cap}]")
    for block, specs in ((obs.tiles, schema.tile), (obs.agents, schema.agent)):
        for j, spec in enumerate(specs):
            if spec.discrete:
                col = block[:, j]
                if (col < spec.kind.min).any() or (col > spec.kind.max).any() or (col != np.round(col)).any():
                    raise ObservationError(f"attribute {spec.name} outside its discrete range")
    if obs.agents[0, A_SELF] != 1:
        raise ObservationError("observer entity must come first with is_self=1")


# ---------------------------------------------------------------------------
# extraction


class ObservationBuilder:
    """Builds observations for many agents from one state snapshot.

    Shares the padded terrain grid and the per-agent attribute table across
    observers, so building all observations for a tick is cheap.
    """

    def __init__(self, state: WorldState, schema: Schema | None = None):
        cfg = state.cfg
        self.state = state
        self.schema = schema or build_schema(cfg)
        self.r = cfg.obs_crop // 2
        crop = cfg.obs_crop
        self.padded = np.pad(
            state.map.terrain, self.r, mode="constant", constant_values=int(Terrain.LAVA)
        )
        dr, dc = np.mgrid[-self.r : self.r + 1, -self.r : self.r + 1]
        self._drow = dr.ravel().astype(np.float32)
        self._dcol = dc.ravel().astype(np.float32)
        self.crop = crop
        ids = sorted(state.agents)
        self.ids = np.array(ids, dtype=np.int64)
        unit = cfg.progression.xp_per_level_unit
        self.pos = np.array([state.agents[i].pos for i in ids], dtype=np.int64).reshape(-1, 2)
        table = np.zeros((len(ids), len(self.schema.agent)), dtype=np.float32)
        for k, aid in enumerate(ids):
            a = state.agents[aid]
            table[k, A_FOOD] = a.food
            table[k, A_WATER] = a.water
            table[k, A_HEALTH] = a.health
            table[k, A_LEVEL] = overall_level(a.skills, unit)
            table[k, A_FROZEN] = 1.0 if a.is_frozen(state.tick) else 0.0
            table[k, A_POP] = a.population
        self.table = table
        self.index = {aid: k for k, aid in enumerate(ids)}

    def tiles_at(self, pos: tuple[int, int]) -> np.ndarray:
        r, c = pos
        # padded coordinates: pos + r is the center, so the crop starts at pos
        window = self.padded[r : r + self.crop, c : c + self.crop].ravel()
        tiles = np.empty((window.size, 4), dtype=np.float32)
        tiles[:, T_TERRAIN] = window
        tiles[:, T_FOOD] = window == Terrain.FOREST
        tiles[:, T_DROW] = self._drow
        tiles[:, T_DCOL] = self._dcol
        return tiles

    def observe(self, agent_id: int) -> Observation:
        if agent_id not in self.index:
            raise ObservationError(f"agent {agent_id} is not alive")
        k = self.index[agent_id]
        me = self.pos[k]
        delta = self.pos - me
        dist = np.abs(delta).max(axis=1)
        visible = np.flatnonzero(dist <= self.r)
        others = visible[visible != k]
        # stable sort by (distance, id); ids are ascending in self.ids already
        others = others[np.argsort(dist[others], kind="stable")]
        chosen = np.concatenate([[k], others])[: self.schema.agent_cap]
        rows = self.table[chosen].copy()
        rows[:, A_DROW] = delta[chosen, 0]
        rows[:, A_DCOL] = delta[chosen, 1]
        rows[:, A_SELF] = 0.0
        rows[0, A_SELF] = 1.0
        rows[:, A_SAME] = rows[:, A_POP] == self.table[k, A_POP]
        return Observation(
            tiles=self.tiles_at((int(me[0]), int(me[1]))),
            agents=rows,
            agent_ids=tuple(int(self.ids[i]) for i in chosen),
        )

    def observe_all(self) -> dict[int, Observation]:
        return {int(aid): self.observe(int(aid)) for aid in self.ids}

    def synthetic(self, pos: tuple[int, int], population: int) -> Observation:
        """A lone default-stat observer standing at ``pos``."""
        cfg = self.state.cfg
        row = np.zeros((1, len(self.schema.agent)), dtype=np.float32)
        row[0, A_FOOD] = cfg.food_max
        row[0, A_WATER] = cfg.water_max
        row[0, A_HEALTH] = cfg.health_max
        row[0, A_LEVEL] = 1
        row[0, A_SELF] = 1
        row[0, A_POP] = population
        row[0, A_SAME] = 1
        return Observation(tiles=self.tiles_at(pos), agents=row, agent_ids=(-1,))


def observe(state: WorldState, agent_id: int) -> Observation:
    return ObservationBuilder(state).observe(agent_id)


# ---------------------------------------------------------------------------
# wire codec


def encode(obs: Observation, schema: Schema) -> bytes:
    n_tiles = obs.tiles.shape[0]
    n_agents = obs.agents.shape[0]
    if n_agents < 1 or n_agents > schema.agent_cap:
        raise ObservationError(f"agent entity count {n_agents} outside [1, {schema.agent_cap}]")
    body = bytearray()
    for kind, block in (("tile", obs.tiles), ("agent", obs.agents)):
        dt = schema.wire_dtype(kind)
        rec = np.empty(block.shape[0], dtype=dt)
        for j, name in enumerate(dt.names):
            rec[name] = block[:, j]
        body += rec.tobytes()
    header = HEADER.pack(HEADER.size - 4 + len(body), schema.version, n_tiles, n_agents)
    return header + bytes(body)


def decode(data: bytes, schema: Schema) -> Observation:
    if len(data) < HEADER.size:
        raise ObservationError("truncated: header incomplete")
    length, version, n_tiles, n_agents = HEADER.unpack_from(data)
    if version != schema.version:
        raise ObservationError(f"schema version mismatch: got {version}, expected {schema.version}")
    if n_tiles != schema.n_tiles:
        raise ObservationError(f"tile count {n_tiles} != {schema.n_tiles}")
    if n_agents < 1:
        raise ObservationError("agent entity count is 0; the observer entity is mandatory")
    if n_agents > schema.agent_cap:
        raise ObservationError(f"agent entity count {n_agents} exceeds cap {schema.agent_cap}")
    expected = schema.wire_size(n_agents)
    if length + 4 != expected:
        raise ObservationError(f"length field {length} inconsistent with entity counts")
    if len(data) < expected:
        raise ObservationError(f"truncated: {len(data)} of {expected} bytes")
    if len(data) > expected:
        raise ObservationError(f"{len(data) - expected} trailing bytes after observation")
    offset = HEADER.size
    blocks = []
    for kind, count in (("tile", n_tiles), ("agent", n_agents)):
        dt = schema.wire_dtype(kind)
        rec = np.frombuffer(data, dtype=dt, count=count, offset=offset)
        offset += count * dt.itemsize
        block = np.empty((count, len(dt.names)), dtype=np.float32)
        for j, name in enumerate(dt.names):
            block[:, j] = rec[name]
        blocks.append(block)
    return Observation(tiles=blocks[0], agents=blocks[1])
