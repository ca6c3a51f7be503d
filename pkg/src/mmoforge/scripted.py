"""Non-learned baseline policies that act from observations alone."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from . import world
from .config import Config, seed_rng
from .engine import MOVE_DELTAS, ActionBundle, Attack, Move, Style
from .obsio import A_DCOL, A_DROW, A_FOOD, A_LEVEL, A_SELF, A_WATER, Observation, ObservationError
from .world import Terrain

VARIANTS = ("idle", "random", "forager", "aggressor")
STEP_MOVES = (Move.NORTH, Move.SOUTH, Move.EAST, Move.WEST)


@dataclass
class ScriptedPolicy:
    variant: str
    cfg: Config
    rng: np.random.Generator

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown scripted policy {self.variant!r}; expected one of {VARIANTS}")


def make_policy(variant: str, cfg: Config, seed: int | None = None) -> ScriptedPolicy:
    seed = cfg.seed if seed is None else seed
    return ScriptedPolicy(variant, cfg, seed_rng(seed, "policy_sampling"))


def legal_moves(grid: np.ndarray) -> list[Move]:
    """Moves from the crop center onto walkable tiles; Stay is always legal."""
    c = grid.shape[0] // 2
    out = []
    for move in STEP_MOVES:
        dr, dc = MOVE_DELTAS[move]
        if world.WALKABLE[grid[c + dr, c + dc]]:
            out.append(move)
    out.append(Move.STAY)
    return out


def _goal_mask(grid: np.ndarray, want: str) -> np.ndarray:
    if want == "food":
        return grid == Terrain.FOREST
    water = grid == Terrain.WATER
    adj = np.zeros_like(water)
    adj[1:, :] |= water[:-1, :]
    adj[:-1, :] |= water[1:, :]
    adj[:, 1:] |= water[:, :-1]
    adj[:, :-1] |= water[:, 1:]
    return adj & world.WALKABLE[grid]


def _first_step(grid: np.ndarray, goal: np.ndarray) -> Move | None:
    """BFS over walkable tiles from the center; first move of a shortest path to any goal."""
    n = grid.shape[0]
    c = n // 2
    if goal[c, c]:
        return Move.STAY
    walk = world.WALKABLE[grid]
    first = np.full((n, n), -1, dtype=np.int64)
    seen = np.zeros((n, n), dtype=bool)
    seen[c, c] = True
    queue: deque[tuple[int, int]] = deque()
    for move in STEP_MOVES:
        dr, dc = MOVE_DELTAS[move]
        r, q = c + dr, c + dc
        if walk[r, q]:
            seen[r, q] = True
            first[r, q] = int(move)
            queue.append((r, q))
    while queue:
        r, q = queue.popleft()
        if goal[r, q]:
            return Move(int(first[r, q]))
        for move in STEP_MOVES:
            dr, dc = MOVE_DELTAS[move]
            rr, qq = r + dr, q + dc
            if 0 <= rr < n and 0 <= qq < n and not seen[rr, qq] and walk[rr, qq]:
                seen[rr, qq] = True
                first[rr, qq] = first[r, q]
                queue.append((rr, qq))
    return None


def _greedy_step(grid: np.ndarray, goal: np.ndarray) -> Move:
    """Legal move that most reduces Manhattan distance to the nearest goal tile."""
    c = grid.shape[0] // 2
    cells = np.argwhere(goal)
    if len(cells) == 0:
        return Move.STAY
    d = np.abs(cells - c).sum(axis=1)
    tr, tc = cells[int(np.argmin(d))]
    best, best_d = Move.STAY, abs(tr - c) + abs(tc - c)
    for move in legal_moves(grid):
        dr, dc = MOVE_DELTAS[move]
        nd = abs(tr - c - dr) + abs(tc - c - dc)
        if nd < best_d:
            best, best_d = move, nd
    return best


def forage_move(obs: Observation) -> Move:
    grid = obs.terrain_grid()
    me = obs.agents[0]
    want = "water" if me[A_WATER] < me[A_FOOD] else "food"
    goal = _goal_mask(grid, want)
    if not goal.any():
        return Move.STAY
    move = _first_step(grid, goal)
    return move if move is not None else _greedy_step(grid, goal)


def choose_attack(obs: Observation, cfg: Config) -> Attack | None:
    """Nearest visible agent in reach, with the most damaging style that reaches it."""
    if obs.agent_ids is None:
        return None
    c = cfg.combat
    styles = sorted(
        ((Style.MELEE, c.melee_damage, c.melee_range), (Style.RANGE, c.range_damage, c.range_range),
         (Style.MAGE, c.mage_damage, c.mage_range)),
        key=lambda s: -s[1],
    )
    me = obs.agents[0]
    for k in range(1, obs.n_agents):
        row = obs.agents[k]
        dist = int(max(abs(row[A_DROW]), abs(row[A_DCOL])))
        if cfg.attack_rule == "level_range" and abs(row[A_LEVEL] - me[A_LEVEL]) > cfg.level_range:
            continue
        for style, _, reach in styles:
            if dist <= reach:
                return Attack(style, obs.agent_ids[k])
    return None


def act(policy: ScriptedPolicy, obs: Observation) -> ActionBundle:
    if obs.agents.ndim != 2 or obs.n_agents < 1 or obs.agents[0, A_SELF] != 1:
        raise ObservationError("malformed observation: observer entity missing")
    if obs.tiles.shape[0] != policy.cfg.obs_crop**2:
        raise ObservationError("malformed observation: wrong tile count")
    if policy.variant == "idle":
        return ActionBundle()
    if policy.variant == "random":
        moves = legal_moves(obs.terrain_grid())
        return ActionBundle(move=moves[int(policy.rng.integers(len(moves)))])
    move = forage_move(obs)
    if policy.variant == "forager":
        return ActionBundle(move=move)
    return ActionBundle(move=move, attack=choose_attack(obs, policy.cfg))
