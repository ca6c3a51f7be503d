"""Lifetime rollouts, discounted returns, policy gradient with a value baseline, and Adam."""

from __future__ import annotations

import csv
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import scripted
from .config import Config, seed_rng
from .engine import ActionBundle, assign_population, new_world, step
from .neural.inference import StackedPolicy
from .neural.network import (
    ObsBatch,
    PolicyParams,
    backward,
    forward_batch,
    init_params,
    to_bundle,
)
from .obsio import ObservationBuilder, Schema, build_schema, decode, encode

log = logging.getLogger(__name__)

__all__ = [
    "OptimState",
    "Rollout",
    "Trajectory",
    "TrajectoryStep",
    "adam_step",
    "assign_population",
    "clip_gradients",
    "evaluate_lifetime",
    "pg_loss",
    "returns",
    "train_step",
]


# ---------------------------------------------------------------------------
# trajectories


@dataclass
class TrajectoryStep:
    wire: bytes
    bundle: ActionBundle
    action: tuple[int, int, int]  # (move, style, target) indices into the network's options
    log_prob: float
    value: float
    reward: float = 0.0


@dataclass
class Trajectory:
    agent_id: int
    population: int
    spawn_tick: int = 0
    steps: list[TrajectoryStep] = field(default_factory=list)
    terminal: bool = False

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def rewards(self) -> list[float]:
        return [s.reward for s in self.steps]

    @property
    def values(self) -> np.ndarray:
        return np.array([s.value for s in self.steps])

    @property
    def log_probs(self) -> np.ndarray:
        return np.array([s.log_prob for s in self.steps])


def returns(rewards: Sequence[float], gamma: float) -> list[float]:
    """Discounted return from every step, accumulated backward in one pass."""
    if not 0 < gamma < 1:
        raise ValueError("gamma must be in (0,1)")
    if len(rewards) == 0:
        raise ValueError("empty reward list")
    out = [0.0] * len(rewards)
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


@dataclass
class LossTerms:
    loss: float
    policy_loss: float
    value_loss: float
    returns: np.ndarray
    advantages: np.ndarray
    d_log_prob: np.ndarray  # d loss / d log pi(a_t|o_t)
    d_value: np.ndarray  # d loss / d V(o_t)


def pg_loss(
    trajectory: Trajectory | Sequence[float],
    values: Sequence[float],
    log_probs: Sequence[float] | None = None,
    gamma: float = 0.95,
) -> LossTerms:
    """sum_t [ -log pi * (R - V)_detached + 0.5 (R - V)^2 ].

    ``trajectory`` may be a Trajectory or a bare reward list; ``log_probs`` default to
    the ones stored in the trajectory.
    """
    if isinstance(trajectory, Trajectory):
        rewards = trajectory.rewards
        if log_probs is None:
            log_probs = trajectory.log_probs
    else:
        rewards = list(trajectory)
    values = np.asarray(values, dtype=np.float64)
    logp = np.zeros(len(rewards)) if log_probs is None else np.asarray(log_probs, dtype=np.float64)
    if len(values) != len(rewards) or len(logp) != len(rewards):
        raise ValueError(f"length mismatch: {len(rewards)} rewards, {len(values)} values, {len(logp)} log-probs")
    R = np.array(returns(rewards, gamma))
    adv = R - values
    policy = float(-(logp * adv).sum())
    value = float(0.5 * (adv**2).sum())
    return LossTerms(
        loss=policy + value,
        policy_loss=policy,
        value_loss=value,
        returns=R,
        advantages=adv,
        d_log_prob=-adv,
        d_value=-adv,
    )


# ---------------------------------------------------------------------------
# optimizer


def clip_gradients(grads, limit: float):
    """Element-wise clamp to [-limit, limit]; accepts an array or a dict of arrays."""
    if limit <= 0:
        raise ValueError("clip limit must be positive")
    if isinstance(grads, dict):
        return {k: np.clip(g, -limit, limit) for k, g in grads.items()}
    return np.clip(grads, -limit, limit)


@dataclass
class OptimState:
    lr: float = 3e-4
    weight_decay: float = 1e-5
    grad_clip: float = 5.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)
    step: int = 0
    dropped: int = 0

    @classmethod
    def from_config(cls, cfg: Config) -> OptimState:
        return cls(lr=cfg.lr, weight_decay=cfg.weight_decay, grad_clip=cfg.grad_clip)


def adam_step(params: PolicyParams, grads: dict[str, np.ndarray], state: OptimState) -> PolicyParams:
    """Adam with decoupled weight decay, in place, over the tensors named in ``grads``.

    Tensors without a gradient entry (populations absent from the batch) are left alone,
    weight decay included. A batch with any non-finite gradient is dropped whole.
    """
    for name, g in grads.items():
        p = params.get(name)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
    if not all(np.isfinite(g).all() for g in grads.values()):
        state.dropped += 1
        log.warning("non-finite gradient at optimizer step %d; batch dropped", state.step)
        return params
    b1, b2 = state.betas
    for name, g in grads.items():
        p = params.get(name)
        g = g.astype(np.float64)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros(p.shape)
            state.v[name] = np.zeros(p.shape)
        v = state.v[name]
        t = state.counts.get(name, 0) + 1
        state.counts[name] = t
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        new = p.astype(np.float64)
        new -= state.lr * state.weight_decay * new
        new -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        params.set(name, new.astype(p.dtype))
    state.step += 1
    params.version += 1
    return params


# ---------------------------------------------------------------------------
# gradient of a trajectory batch


@dataclass
class BatchGradient:
    grads: dict[str, np.ndarray]  # full tensor names; sums over actions (not yet averaged)
    n_actions: int
    policy_loss: float
    value_loss: float
    returns0: list[float]
    lifetimes: list[int]


def _stack_decoded(trajs: Sequence[Trajectory], schema: Schema):
    obs = [decode(s.wire, schema) for t in trajs for s in t.steps]
    actions = np.array([s.action for t in trajs for s in t.steps], dtype=np.int64)
    return obs, actions


def trajectory_gradients(
    trajectories: Sequence[Trajectory],
    params: PolicyParams,
    schema: Schema,
    cfg: Config,
    chunk: int = 2048,
) -> BatchGradient:
    """Summed loss gradients over every action in ``trajectories``.

    Observations are re-decoded from their wire bytes and the network is re-run with the
    recorded actions. Shared tensors collect gradient from every population; a population
    block only from its own trajectories.
    """
    if not trajectories:
        raise ValueError("empty batch")
    grads: dict[str, np.ndarray] = {}
    policy_loss = value_loss = 0.0
    n_actions = 0
    by_pop: dict[int, list[Trajectory]] = defaultdict(list)
    for t in trajectories:
        if len(t) == 0:
            continue
        by_pop[t.population].append(t)
    for pop in sorted(by_pop):
        trajs = by_pop[pop]
        view = params.view(pop)
        R = np.concatenate([returns(t.rewards, cfg.gamma) for t in trajs])
        obs, actions = _stack_decoded(trajs, schema)
        for lo in range(0, len(obs), chunk):
            hi = min(lo + chunk, len(obs))
            trace = forward_batch(
                ObsBatch.from_observations(obs[lo:hi]), view, schema, cfg,
                actions=actions[lo:hi], with_entropy=cfg.entropy_coef > 0,
            )
            V = trace.value.data.astype(np.float64)
            adv = R[lo:hi] - V
            policy_loss += float(-(trace.log_prob.data * adv).sum())
            value_loss += float(0.5 * (adv**2).sum())
            seeds = {"log_prob": -adv, "value": -adv}
            if cfg.entropy_coef > 0:
                seeds["entropy"] = np.full(hi - lo, -cfg.entropy_coef)
            g = backward(trace, seeds, view)
            for name, arr in g.items():
                full = f"shared.{name}" if name in params.shared else f"pop{pop}.{name}"
                if full in grads:
                    grads[full] += arr
                else:
                    grads[full] = arr.astype(np.float64)
        n_actions += len(obs)
    lifetimes = [len(t) for t in trajectories if t.terminal]
    return BatchGradient(
        grads=grads,
        n_actions=n_actions,
        policy_loss=policy_loss,
        value_loss=value_loss,
        returns0=[returns(t.rewards, cfg.gamma)[0] for t in trajectories if len(t)],
        lifetimes=lifetimes,
    )


def apply_gradient(
    params: PolicyParams, grads: dict[str, np.ndarray], n_actions: int, optim: OptimState
) -> tuple[PolicyParams, float]:
    """Average over actions, clip element-wise, Adam. Returns params and the pre-clip norm."""
    mean = {k: g / n_actions for k, g in grads.items()}
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in mean.values())))
    adam_step(params, clip_gradients(mean, optim.grad_clip), optim)
    return params, norm


def train_step(
    trajectories: Sequence[Trajectory],
    params: PolicyParams,
    optim: OptimState,
    cfg: Config,
    schema: Schema | None = None,
) -> tuple[PolicyParams, dict[str, float]]:
    schema = schema or build_schema(cfg)
    bg = trajectory_gradients(trajectories, params, schema, cfg)
    if bg.n_actions == 0:
        raise ValueError("empty batch")
    params, norm = apply_gradient(params, bg.grads, bg.n_actions, optim)
    metrics = {
        "step": optim.step,
        "mean_lifetime": float(np.mean(bg.lifetimes)) if bg.lifetimes else float("nan"),
        "mean_return": float(np.mean(bg.returns0)),
        "value_loss": bg.value_loss / bg.n_actions,
        "policy_loss": bg.policy_loss / bg.n_actions,
        "grad_norm": norm,
        "n_actions": bg.n_actions,
    }
    return params, metrics


# ---------------------------------------------------------------------------
# rollouts


class Rollout:
    """A persistent world whose agents act from the neural policy (or a scripted one).

    Every living agent's trajectory is kept until it dies; completed trajectories queue
    up until collected.
    """

    def __init__(
        self,
        cfg: Config,
        params: PolicyParams | None = None,
        seed: int | None = None,
        policy: str = "neural",
        schema: Schema | None = None,
    ):
        self.cfg = cfg
        self.seed = cfg.seed if seed is None else seed
        self.schema = schema or build_schema(cfg)
        self.params = params
        self.policy = policy
        if policy == "neural" and params is None:
            raise ValueError("neural rollouts need parameters")
        self.scripted = None if policy == "neural" else scripted.make_policy(policy, cfg, self.seed)
        self.state = new_world(cfg, seed=self.seed)
        self.rng = seed_rng(self.seed, "policy_sampling")
        self.live: dict[int, Trajectory] = {}
        self.completed: list[Trajectory] = []
        self.lifetimes: list[int] = []
        self._stacked: StackedPolicy | None = None

    def _policy(self) -> StackedPolicy:
        if self._stacked is None or self._stacked.params is not self.params or self._stacked.version != self.params.version:
            self._stacked = StackedPolicy(self.params, self.schema, self.cfg)
        return self._stacked

    def retained_steps(self) -> dict[int, int]:
        return {aid: len(t) for aid, t in self.live.items()}

    def _decide(self, observations: dict) -> dict[int, tuple[ActionBundle, tuple[int, int, int], float, float]]:
        out = {}
        if self.scripted is not None:
            for aid, obs in observations.items():
                out[aid] = (scripted.act(self.scripted, obs), (0, 0, 0), 0.0, 0.0)
            return out
        ids = list(observations)
        if not ids:
            return out
        obs = [observations[a] for a in ids]
        pops = np.array([self.state.agents[a].population for a in ids], dtype=np.int64)
        res = self._policy().act(ObsBatch.from_observations(obs), pops, self.rng)
        for k, aid in enumerate(ids):
            act = res.actions[k]
            out[aid] = (
                to_bundle(obs[k], act),
                (int(act[0]), int(act[1]), int(act[2])),
                float(res.log_prob[k]),
                float(res.value[k]),
            )
        return out

    def tick(self):
        state = self.state
        for aid, agent in state.agents.items():
            if aid not in self.live:
                self.live[aid] = Trajectory(aid, agent.population, spawn_tick=agent.spawn_tick)
        observations = ObservationBuilder(state, self.schema).observe_all()
        decisions = self._decide(observations)
        for aid, (bundle, action, logp, value) in decisions.items():
            self.live[aid].steps.append(
                TrajectoryStep(encode(observations[aid], self.schema), bundle, action, logp, value)
            )
        _, events, rewards = step(state, {aid: d[0] for aid, d in decisions.items()})
        for death in events.deaths:
            aid = death["agent"]
            traj = self.live.pop(aid)
            traj.steps[-1].reward = rewards[aid]
            traj.terminal = True
            self.completed.append(traj)
            self.lifetimes.append(death["lifetime"])
        return events

    def collect(self, n_actions: int, max_ticks: int = 100_000) -> list[Trajectory]:
        """Tick until completed trajectories hold at least ``n_actions`` actions."""
        ticks = 0
        while sum(len(t) for t in self.completed) < n_actions:
            if ticks >= max_ticks:
                raise RuntimeError(f"collected fewer than {n_actions} actions in {max_ticks} ticks")
            self.tick()
            ticks += 1
        out, self.completed = self.completed, []
        return out

    def censored_lifetimes(self) -> list[int]:
        """Completed lifetimes plus the current age of every living agent."""
        tick = self.state.tick
        return self.lifetimes + [tick - a.spawn_tick for a in self.state.agents.values()]


def evaluate_lifetime(
    cfg: Config,
    params: PolicyParams | None,
    seed: int,
    ticks: int,
    policy: str = "neural",
) -> float:
    """Mean agent lifetime over a fixed-length run, counting survivors at their current age."""
    ro = Rollout(cfg, params, seed=seed, policy=policy)
    for _ in range(ticks):
        ro.tick()
        ro.completed.clear()
    return float(np.mean(ro.censored_lifetimes()))


# ---------------------------------------------------------------------------
# training loop


METRIC_FIELDS = ("step", "mean_lifetime", "mean_return", "value_loss", "policy_loss", "grad_norm")


def train(
    cfg: Config,
    steps: int,
    seed: int | None = None,
    params: PolicyParams | None = None,
    metrics_path: str | Path | None = None,
    checkpoint_path: str | Path | None = None,
    checkpoint_every: int = 0,
    batch_actions: int | None = None,
) -> tuple[PolicyParams, list[dict[str, float]]]:
    """Single-process training: collect a batch, take one optimizer step, repeat."""
    from .neural import checkpoint

    seed = cfg.seed if seed is None else seed
    schema = build_schema(cfg)
    params = params or init_params(schema, cfg, seed_rng(seed, "init"))
    optim = OptimState.from_config(cfg)
    rollout = Rollout(cfg, params, seed=seed, schema=schema)
    batch = batch_actions or cfg.batch_actions
    history = []
    writer = None
    fh = None
    if metrics_path is not None:
        fh = open(metrics_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(METRIC_FIELDS)
    try:
        for i in range(steps):
            trajs = rollout.collect(batch)
            params, metrics = train_step(trajs, params, optim, cfg, schema)
            history.append(metrics)
            if writer is not None:
                writer.writerow([metrics[k] for k in METRIC_FIELDS])
                fh.flush()
            if checkpoint_path and checkpoint_every and (i + 1) % checkpoint_every == 0:
                checkpoint.save(checkpoint_path, params, cfg)
            log.info("step %d lifetime %.2f value_loss %.4f", i + 1, metrics["mean_lifetime"], metrics["value_loss"])
    finally:
        if fh is not None:
            fh.close()
    if checkpoint_path:
        checkpoint.save(checkpoint_path, params, cfg)
    return params, history


def population_census(spawn_indices: Iterable[int], n_populations: int) -> np.ndarray:
    counts = np.zeros(n_populations, dtype=np.int64)
    for i in spawn_indices:
        counts[assign_population(i, n_populations)] += 1
    return counts
