"""Visitation maps, coverage, value overlays, heatmap export and the sync-time benchmark."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from . import world
from .config import Config
from .engine import WorldState
from .neural import autodiff as ad
from .neural.network import ObsBatch, PolicyParams, forward_batch
from .obsio import ObservationBuilder, build_schema
from .world import TileMap

# ---------------------------------------------------------------------------
# visitation


@dataclass
class VisitationCounter:
    counts: np.ndarray  # (n_populations, H, W) int64

    @classmethod
    def for_state(cls, state: WorldState) -> VisitationCounter:
        h, w = state.map.terrain.shape
        return cls(np.zeros((state.cfg.n_populations, h, w), dtype=np.int64))

    def total(self) -> np.ndarray:
        return self.counts.sum(axis=0)

    def grid(self, population: int | None = None) -> np.ndarray:
        return self.total() if population is None else self.counts[population]


def record_visits(counter: VisitationCounter, state: WorldState) -> VisitationCounter:
    for agent in state.agents.values():
        r, c = agent.pos
        counter.counts[agent.population, r, c] += 1
    return counter


def _explorable(tile_map: TileMap) -> np.ndarray:
    return world.PASSABLE[tile_map.terrain] & ~world.LETHAL[tile_map.terrain] & tile_map.interior_mask()


def coverage(counter: VisitationCounter, tile_map: TileMap, population: int | None = None) -> float:
    """Fraction of passable interior tiles visited at least once."""
    mask = _explorable(tile_map)
    n = int(mask.sum())
    if n == 0:
        return 0.0
    return float(((counter.grid(population) > 0) & mask).sum() / n)


def visitation_entropy(counter: VisitationCounter, population: int | None = None) -> float:
    """Shannon entropy (bits) of the visit distribution over tiles; 0 for no visits."""
    g = counter.grid(population).astype(np.float64).ravel()
    s = g.sum()
    if s == 0:
        return 0.0
    p = g[g > 0] / s
    return float(-(p * np.log2(p)).sum())


def scripted_coverage(
    cfg: Config, variant: str, n_agents: int, ticks: int, seed: int
) -> tuple[float, float, VisitationCounter]:
    """Run a scripted population of at most ``n_agents`` and report (coverage, entropy, counter)."""
    from . import scripted
    from .engine import new_world, step

    cfg = cfg.replace(spawn_cap=n_agents)
    state = new_world(cfg, seed=seed)
    schema = build_schema(cfg)
    policy = scripted.make_policy(variant, cfg, seed)
    counter = VisitationCounter.for_state(state)
    for _ in range(ticks):
        observations = ObservationBuilder(state, schema).observe_all()
        step(state, {aid: scripted.act(policy, o) for aid, o in observations.items()})
        record_visits(counter, state)
    return coverage(counter, state.map), visitation_entropy(counter), counter


# ---------------------------------------------------------------------------
# value overlay


def value_overlay(
    params: PolicyParams, state: WorldState, population: int, chunk: int = 1024
) -> np.ndarray:
    """Value estimate of a lone default-stat observer placed on every passable interior tile.

    Other tiles read 0.
    """
    cfg = state.cfg
    schema = build_schema(cfg)
    builder = ObservationBuilder(state, schema)
    cells = np.argwhere(_explorable(state.map))
    grid = np.zeros(state.map.terrain.shape, dtype=np.float64)
    view = params.view(population)
    for lo in range(0, len(cells), chunk):
        part = cells[lo : lo + chunk]
        obs = [builder.synthetic((int(r), int(c)), population) for r, c in part]
        with ad.no_grad():
            trace = forward_batch(
                ObsBatch.from_observations(obs), view, schema, cfg, actions=np.zeros((len(obs), 3), dtype=np.int64),
                requires_grad=False,
            )
        grid[part[:, 0], part[:, 1]] = trace.value.data
    return grid


# ---------------------------------------------------------------------------
# export


def _base(path: str | Path) -> Path:
    p = Path(path)
    return p.with_suffix("") if p.suffix in (".csv", ".pgm") else p


def export_heatmap(
    grid: np.ndarray, path: str | Path, mask: np.ndarray | None = None, color_scale: str = "linear"
) -> tuple[Path, Path]:
    """Write ``<path>.csv`` (exact values) and ``<path>.pgm`` (8-bit, min-max normalized).

    Tiles outside ``mask`` render as 0. ``color_scale`` is "linear" or "log" (log1p
    before normalizing, for heavy-tailed visit counts).
    """
    grid = np.asarray(grid, dtype=np.float64)
    if not np.isfinite(grid).all():
        raise ValueError("heatmap grid must be finite")
    if color_scale not in ("linear", "log"):
        raise ValueError(f"unknown color scale {color_scale!r}")
    mask = np.ones(grid.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    base = _base(path)
    base.parent.mkdir(parents=True, exist_ok=True)
    csv_path, pgm_path = base.with_suffix(".csv"), base.with_suffix(".pgm")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in grid:
            writer.writerow([repr(float(v)) for v in row])

    shown = np.log1p(np.maximum(grid, 0)) if color_scale == "log" else grid
    pixels = np.zeros(grid.shape, dtype=np.uint8)
    if mask.any():
        vals = shown[mask]
        lo, hi = vals.min(), vals.max()
        if hi > lo:
            pixels[mask] = np.rint(1 + 254 * (vals - lo) / (hi - lo)).astype(np.uint8)
        else:
            pixels[mask] = 128
    h, w = grid.shape
    with open(pgm_path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(pixels.tobytes())
    return csv_path, pgm_path


def read_csv_grid(path: str | Path) -> np.ndarray:
    with open(path, newline="") as fh:
        return np.array([[float(v) for v in row] for row in csv.reader(fh)], dtype=np.float64)


def read_pgm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = (int(x) for x in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w)


# ---------------------------------------------------------------------------
# synchronization benchmark


class _PacketServer:
    """Bench stand-in for a server: returns a fixed gradient packet."""

    def __init__(self, n_values: int):
        self.packet = np.arange(n_values, dtype=np.int64)

    def gradient(self) -> np.ndarray:
        return self.packet


class _ObservationClient:
    """Bench stand-in for a client: decodes its shard of observations."""

    def __init__(self, cfg: Config):
        self.schema = build_schema(cfg)

    def consume(self, wires: list[bytes]) -> int:
        from .obsio import decode

        return sum(decode(w, self.schema).n_agents for w in wires)


@dataclass
class BenchReport:
    rows: list[dict] = field(default_factory=list)

    def add(self, boundary: str, n_servers: int, n_clients: int, batch_actions: int, times: Sequence[float]) -> None:
        if len(times) < 1:
            raise ValueError("no trials")
        self.rows.append(
            {
                "boundary": boundary,
                "n_servers": n_servers,
                "n_clients": n_clients,
                "batch_actions": batch_actions,
                "trials": len(times),
                "mean_s": float(np.mean(times)),
                "std_s": float(np.std(times, ddof=1)) if len(times) > 1 else 0.0,
            }
        )

    def series(self, boundary: str) -> tuple[np.ndarray, np.ndarray]:
        rows = [r for r in self.rows if r["boundary"] == boundary]
        key = "n_servers" if boundary == "cluster-server" else "n_clients"
        return np.array([r[key] for r in rows], dtype=float), np.array([r["mean_s"] for r in rows])

    def linear_fit(self, boundary: str = "cluster-server") -> tuple[float, float, float]:
        """(slope, intercept, R^2) of mean time against worker count."""
        x, y = self.series(boundary)
        fit = stats.linregress(x, y)
        return float(fit.slope), float(fit.intercept), float(fit.rvalue**2)

    def band_ratio(self, boundary: str = "server-client") -> float:
        _, y = self.series(boundary)
        return float(y.max() / y.min())

    def to_csv(self, path: str | Path) -> None:
        fields = ["boundary", "n_servers", "n_clients", "batch_actions", "trials", "mean_s", "std_s"]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=fields)
            w.writeheader()
            w.writerows(self.rows)

    def summary(self) -> dict:
        out = {}
        if any(r["boundary"] == "cluster-server" for r in self.rows):
            slope, intercept, r2 = self.linear_fit("cluster-server")
            out["cluster_server"] = {"slope_s": slope, "intercept_s": intercept, "r2": r2}
        if any(r["boundary"] == "server-client" for r in self.rows):
            out["server_client"] = {"max_over_min": self.band_ratio("server-client")}
        return out


def bench_observations(cfg: Config, n: int, seed: int = 0) -> list[bytes]:
    """``n`` encoded observations from a populated world (recycled if it has fewer agents)."""
    from .engine import new_world, step
    from .obsio import encode

    state = new_world(cfg, seed=seed)
    schema = build_schema(cfg)
    for _ in range(12):  # idle agents starve at 14 ticks; stop while the world is fullest
        step(state, {})
    obs = list(ObservationBuilder(state, schema).observe_all().values())
    wires = [encode(o, schema) for o in obs]
    return [wires[i % len(wires)] for i in range(n)]


def bench_sync(
    cfg: Config,
    servers: Sequence[int] = (1, 2, 4, 8),
    clients: Sequence[int] = (1, 2, 4, 8),
    trials: int = 20,
    batch_actions: int = 4096,
    packet_values: int | None = None,
    warmup: int = 2,
) -> BenchReport:
    """Time one synchronize round at each boundary, with worker processes over TCP.

    Cluster-server: every server returns a gradient packet the size of the full
    parameter set, so cluster-side receive time grows with the server count.
    Server-client: ``batch_actions`` encoded observations are sharded over the clients.
    """
    from .ascend.node import distribute, synchronize
    from .ascend.protocol import Layer
    from .ascend.tcp import WorkerPool
    from .neural.network import param_shapes

    if trials < 1:
        raise ValueError("trials must be >= 1")
    if packet_values is None:
        shared, pop = param_shapes(build_schema(cfg), cfg)
        packet_values = sum(int(np.prod(s)) for s in shared.values()) + cfg.n_populations * sum(
            int(np.prod(s)) for s in pop.values()
        )
    report = BenchReport()
    for n in servers:
        with WorkerPool([lambda: _PacketServer(packet_values)] * n, Layer.SERVER, heartbeat_interval=0) as pool:
            node = pool.node(Layer.CLUSTER)
            times = []
            for t in range(warmup + trials):
                t0 = time.perf_counter()
                res = synchronize(distribute(node, [], None, "gradient"))
                dt = time.perf_counter() - t0
                if any(not isinstance(r, np.ndarray) for r in res):
                    raise RuntimeError(f"bench server failed: {res}")
                if t >= warmup:
                    times.append(dt)
            report.add("cluster-server", n, 0, batch_actions, times)
    wires = bench_observations(cfg, batch_actions)
    for n in clients:
        with WorkerPool([lambda: _ObservationClient(cfg)] * n, Layer.CLIENT, heartbeat_interval=0) as pool:
            node = pool.node(Layer.SERVER)
            times = []
            for t in range(warmup + trials):
                t0 = time.perf_counter()
                res = synchronize(distribute(node, [wires], (0,), "consume"))
                dt = time.perf_counter() - t0
                if any(not isinstance(r, int) for r in res):
                    raise RuntimeError(f"bench client failed: {res}")
                if t >= warmup:
                    times.append(dt)
            report.add("server-client", 1, n, batch_actions, times)
    return report
