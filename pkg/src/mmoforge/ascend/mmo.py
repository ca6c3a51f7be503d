"""The cluster / server / client training stack.

* Clients hold a parameter snapshot. They pick actions for the agents they are handed,
  and turn completed trajectories into gradient packets.
* Servers each own one world. A server ticks it, shards observations over its clients
  and relays the summed gradient packet upward.
* The cluster sums packets from the servers, takes one optimizer step and broadcasts the
  new parameters down the stack.

Gradient packets hold integer fixed-point sums (2^-32 resolution). Integer addition is
associative, so the result does not depend on how trajectories were split over servers
and clients. Each trajectory is differentiated on its own and then quantized.
"""

from __future__ import annotations

import functools
import hashlib
import logging
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from ..config import Config, seed_rng
from ..engine import new_world, step as world_step
from ..neural import checkpoint
from ..neural.inference import StackedPolicy
from ..neural.network import ObsBatch, PolicyParams, init_params, to_bundle
from ..obsio import ObservationBuilder, build_schema, decode, encode
from ..trainer import OptimState, Trajectory, TrajectoryStep, apply_gradient, trajectory_gradients
from .node import LayerNode, WorkerFailure, inprocess_node, step
from .protocol import Layer

log = logging.getLogger(__name__)

FIXED_POINT_BITS = 32
FIXED_POINT_SCALE = float(2**FIXED_POINT_BITS)


@dataclass
class GradientPacket:
    sums: dict[str, np.ndarray] = field(default_factory=dict)  # int64 fixed point
    n_actions: int = 0
    lifetimes: list[int] = field(default_factory=list)
    value_loss: float = 0.0
    policy_loss: float = 0.0

    def add(self, other: GradientPacket) -> GradientPacket:
        for k, v in other.sums.items():
            if k in self.sums:
                self.sums[k] = self.sums[k] + v
            else:
                self.sums[k] = v.copy()
        self.n_actions += other.n_actions
        self.lifetimes += other.lifetimes
        self.value_loss += other.value_loss
        self.policy_loss += other.policy_loss
        return self

    def gradients(self) -> dict[str, np.ndarray]:
        return {k: v.astype(np.float64) / FIXED_POINT_SCALE for k, v in self.sums.items()}


def quantize(g: np.ndarray) -> np.ndarray:
    return np.rint(np.asarray(g, dtype=np.float64) * FIXED_POINT_SCALE).astype(np.int64)


def merge_packets(packets: Sequence[GradientPacket]) -> GradientPacket:
    out = GradientPacket()
    for p in packets:
        out.add(p)
    return out


def params_digest(params: PolicyParams) -> str:
    return params.digest()


# ---------------------------------------------------------------------------
# client


class ClientWorker:
    def __init__(self, cfg: Config, seed: int, params: PolicyParams | None = None):
        self.cfg = cfg
        self.schema = build_schema(cfg)
        self.rng = seed_rng(seed, "policy_sampling")
        self.params = params
        self._policy: StackedPolicy | None = None

    def set_params(self, blob: bytes) -> str:
        self.params = checkpoint.loads(blob, self.cfg)
        self._policy = None
        return self.params.digest()

    def digest(self) -> str:
        return self.params.digest()

    def act(self, wires: list[bytes], pops: list[int]) -> list[tuple[tuple[int, int, int], float, float]]:
        if not wires:
            return []
        if self._policy is None:
            self._policy = StackedPolicy(self.params, self.schema, self.cfg)
        obs = [decode(w, self.schema) for w in wires]
        res = self._policy.act(ObsBatch.from_observations(obs), np.asarray(pops, dtype=np.int64), self.rng)
        return [
            ((int(a[0]), int(a[1]), int(a[2])), float(lp), float(v))
            for a, lp, v in zip(res.actions, res.log_prob, res.value)
        ]

    def gradients(self, trajectories: list[Trajectory]) -> GradientPacket:
        packet = GradientPacket()
        for traj in trajectories:
            if len(traj) == 0:
                continue
            bg = trajectory_gradients([traj], self.params, self.schema, self.cfg)
            packet.add(
                GradientPacket(
                    sums={k: quantize(v) for k, v in bg.grads.items()},
                    n_actions=bg.n_actions,
                    lifetimes=bg.lifetimes,
                    value_loss=bg.value_loss,
                    policy_loss=bg.policy_loss,
                )
            )
        return packet

    def crash(self) -> None:
        raise RuntimeError("injected client failure")


# ---------------------------------------------------------------------------
# server


class ServerWorker:
    """One world plus a client layer. ``clients`` overrides the default in-process ones."""

    def __init__(self, cfg: Config, seed: int, n_clients: int, clients: Sequence[Any] | None = None):
        self.cfg = cfg
        self.seed = seed
        self.schema = build_schema(cfg)
        self.state = new_world(cfg, seed=seed)
        workers = clients if clients is not None else [ClientWorker(cfg, seed * 1000 + c) for c in range(n_clients)]
        self.clients = workers
        self.node: LayerNode = inprocess_node(Layer.SERVER, workers)
        self.live: dict[int, Trajectory] = {}
        self.completed: list[Trajectory] = []

    def set_params(self, blob: bytes) -> list[str]:
        digests = step(self.node, [blob], None, "set_params")
        return [d if not isinstance(d, WorkerFailure) else f"failed: {d.message}" for d in digests]

    def tick(self) -> int:
        state = self.state
        for aid, agent in state.agents.items():
            if aid not in self.live:
                self.live[aid] = Trajectory(aid, agent.population, spawn_tick=agent.spawn_tick)
        observations = ObservationBuilder(state, self.schema).observe_all()
        ids = list(observations)
        wires = [encode(observations[a], self.schema) for a in ids]
        pops = [state.agents[a].population for a in ids]
        results = step(self.node, [wires, pops], (0, 1), "act")
        decisions = []
        for r in results:
            if isinstance(r, WorkerFailure):
                raise RuntimeError(f"client {r.worker} failed while acting: {r.message}")
            decisions.extend(r)
        actions = {}
        for aid, wire, (action, logp, value) in zip(ids, wires, decisions):
            bundle = to_bundle(observations[aid], np.array(action))
            actions[aid] = bundle
            self.live[aid].steps.append(TrajectoryStep(wire, bundle, action, logp, value))
        _, events, rewards = world_step(state, actions)
        for death in events.deaths:
            traj = self.live.pop(death["agent"])
            traj.steps[-1].reward = rewards[death["agent"]]
            traj.terminal = True
            self.completed.append(traj)
        return len(ids)

    def collect(self, n_actions: int) -> GradientPacket:
        """Tick until completed trajectories cover ``n_actions`` actions, then differentiate them."""
        while sum(len(t) for t in self.completed) < n_actions:
            self.tick()
        trajs, self.completed = self.completed, []
        return self.gradients(trajs)

    def inject(self, chunks: list[list[Trajectory]]) -> GradientPacket:
        """Differentiate externally supplied trajectories (one or more lists, concatenated)."""
        return self.gradients([t for chunk in chunks for t in chunk])

    def gradients(self, trajectories: list[Trajectory]) -> GradientPacket:
        packets = step(self.node, [trajectories], (0,), "gradients")
        good = []
        for p in packets:
            if isinstance(p, WorkerFailure):
                log.warning("client %d dropped from gradient sum: %s", p.worker, p.message)
            else:
                good.append(p)
        return merge_packets(good)


# ---------------------------------------------------------------------------
# cluster


@dataclass
class Cluster:
    cfg: Config
    node: LayerNode
    params: PolicyParams
    optim: OptimState
    servers: list[Any] = field(default_factory=list)  # in-process server objects, for inspection
    incidents: list[str] = field(default_factory=list)
    pool: Any = None  # WorkerPool when servers run as processes

    def broadcast(self) -> list[Any]:
        blob = checkpoint.dumps(self.params, self.cfg)
        return step(self.node, [blob], None, "set_params")

    def close(self) -> None:
        if self.pool is not None:
            self.pool.close()
        else:
            self.node.close()


def build_stack(
    cfg: Config,
    n_servers: int,
    n_clients: int,
    seed: int = 0,
    params: PolicyParams | None = None,
    distributed: bool = False,
) -> Cluster:
    """Cluster of ``n_servers`` servers with ``n_clients`` clients each.

    With ``distributed`` every server runs in its own process behind the TCP transport;
    its clients stay threads inside that process.
    """
    params = params or init_params(build_schema(cfg), cfg, seed_rng(seed, "init"))
    factories = [functools.partial(ServerWorker, cfg, seed * 100 + s, n_clients) for s in range(n_servers)]
    if distributed:
        from .tcp import WorkerPool

        pool = WorkerPool(factories, Layer.SERVER)
        cluster = Cluster(cfg, pool.node(Layer.CLUSTER), params, OptimState.from_config(cfg), pool=pool)
    else:
        servers = [f() for f in factories]
        node = inprocess_node(Layer.CLUSTER, servers)
        cluster = Cluster(cfg, node, params, OptimState.from_config(cfg), servers)
    cluster.broadcast()
    return cluster


def run_cluster_epoch(
    cluster: Cluster,
    n_actions: int | None = None,
    trajectories: Sequence[list[Trajectory]] | None = None,
) -> dict[str, Any]:
    """One collect / aggregate / update / broadcast cycle.

    ``trajectories`` (one list per server) bypasses collection and differentiates the given
    data instead; ``n_actions`` is the per-server collection target.
    """
    n_servers = cluster.node.n_workers
    if trajectories is not None:
        if len(trajectories) != n_servers:
            raise ValueError("need one trajectory list per server")
        packets = step(cluster.node, [list(trajectories)], (0,), "inject")
    else:
        per_server = n_actions or max(1, cluster.cfg.batch_actions // max(1, n_servers))
        packets = step(cluster.node, [per_server], None, "collect")
    good = []
    for p in packets:
        if isinstance(p, WorkerFailure):
            msg = f"server {p.worker} dropped from aggregation: {p.kind}: {p.message}"
            log.warning(msg)
            cluster.incidents.append(msg)
        else:
            good.append(p)
    if not good:
        raise RuntimeError("every server failed this epoch")
    total = merge_packets(good)
    if total.n_actions == 0:
        raise ValueError("empty batch")
    _, norm = apply_gradient(cluster.params, total.gradients(), total.n_actions, cluster.optim)
    replies = cluster.broadcast()
    digests = [d for r in replies if not isinstance(r, WorkerFailure) for d in r]
    return {
        "step": cluster.optim.step,
        "servers": len(good),
        "n_actions": total.n_actions,
        "mean_lifetime": float(np.mean(total.lifetimes)) if total.lifetimes else float("nan"),
        "value_loss": total.value_loss / total.n_actions,
        "policy_loss": total.policy_loss / total.n_actions,
        "grad_norm": norm,
        "params_digest": cluster.params.digest(),
        "client_digests": digests,
    }


def packet_digest(packet: GradientPacket) -> str:
    h = hashlib.sha256()
    for k in sorted(packet.sums):
        h.update(k.encode())
        h.update(packet.sums[k].tobytes())
    return h.hexdigest()
