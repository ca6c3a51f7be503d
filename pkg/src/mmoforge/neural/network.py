"""Policy network generated from the observation schema.

Input side: every attribute gets its own embedder (lookup table for discrete, affine for
continuous). Attribute embeddings of one entity are mixed by a single-head scaled
dot-product self-attention and mean-pooled into an entity embedding. Agent entity
embeddings go through a second attention + masked mean; tile entity embeddings are laid
out on the crop grid and reduced by two stride-2 3x3 convolutions. Both summaries are
concatenated into the flat observation embedding.

Output side: a two-layer MLP produces the hidden state, which keys move, style and
target argument embeddings (target candidates are the visible agents' entity embeddings
plus a learned null-target embedding). The value head reads the same hidden state.

Embedders, argument tables and the null target are shared by all populations; every
other tensor belongs to one population.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from ..config import Config
from ..engine import ActionBundle, Attack, Move, Style
from ..obsio import AttributeSpec, Continuous, Observation, Schema
from . import autodiff as ad
from .autodiff import Tensor

N_MOVES = len(Move)
N_STYLES = len(Style)


# ---------------------------------------------------------------------------
# parameters


@dataclass
class PolicyParams:
    shared: dict[str, np.ndarray]
    populations: list[dict[str, np.ndarray]]
    version: int = 0  # bumped by the optimizer; lets inference caches notice updates

    @property
    def n_populations(self) -> int:
        return len(self.populations)

    def view(self, population: int) -> dict[str, np.ndarray]:
        return {**self.shared, **self.populations[population]}

    def named_tensors(self) -> Iterator[tuple[str, np.ndarray]]:
        for name in sorted(self.shared):
            yield f"shared.{name}", self.shared[name]
        for p, block in enumerate(self.populations):
            for name in sorted(block):
                yield f"pop{p}.{name}", block[name]

    def get(self, full_name: str) -> np.ndarray:
        scope, _, name = full_name.partition(".")
        if scope == "shared":
            return self.shared[name]
        return self.populations[int(scope[3:])][name]

    def set(self, full_name: str, value: np.ndarray) -> None:
        scope, _, name = full_name.partition(".")
        if scope == "shared":
            self.shared[name] = value
        else:
            self.populations[int(scope[3:])][name] = value

    def copy(self) -> PolicyParams:
        return PolicyParams(
            {k: v.copy() for k, v in self.shared.items()},
            [{k: v.copy() for k, v in block.items()} for block in self.populations],
        )

    def astype(self, dtype) -> PolicyParams:
        return PolicyParams(
            {k: v.astype(dtype) for k, v in self.shared.items()},
            [{k: v.astype(dtype) for k, v in block.items()} for block in self.populations],
        )

    def count(self) -> int:
        return sum(v.size for _, v in self.named_tensors())

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, arr in self.named_tensors():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def conv_out(size: int) -> int:
    return (size + 2 - 3) // 2 + 1


def param_shapes(schema: Schema, cfg: Config) -> tuple[dict[str, tuple], dict[str, tuple]]:
    """Shapes of the shared and per-population blocks; a pure function of (schema, cfg)."""
    d, h = cfg.embed_dim, cfg.hidden_dim
    shared: dict[str, tuple] = {}
    for kind in ("tile", "agent"):
        for spec in schema.entity(kind):
            if isinstance(spec.kind, Continuous):
                shared[f"emb.{kind}.{spec.name}.w"] = (1, d)
                shared[f"emb.{kind}.{spec.name}.b"] = (d,)
            else:
                shared[f"emb.{kind}.{spec.name}"] = (spec.kind.size, d)
    shared["arg.move"] = (N_MOVES, d)
    shared["arg.style"] = (N_STYLES, d)
    shared["arg.null"] = (1, d)

    pop: dict[str, tuple] = {}
    for prefix in ("f", "g"):
        for m in ("q", "k", "v"):
            pop[f"{prefix}.{m}"] = (d, d)
    if cfg.tile_aggregator == "conv":
        s = conv_out(conv_out(schema.crop))
        pop["conv1.w"] = (9 * d, d)
        pop["conv1.b"] = (d,)
        pop["conv2.w"] = (9 * d, d)
        pop["conv2.b"] = (d,)
        pop["tile.w"] = (s * s * d, d)
    else:
        pop["tile.w"] = (d, d)
    pop["tile.b"] = (d,)
    pop["obs.w"] = (2 * d, h)
    pop["obs.b"] = (h,)
    pop["mlp1.w"] = (h, h)
    pop["mlp1.b"] = (h,)
    pop["mlp2.w"] = (h, h)
    pop["mlp2.b"] = (h,)
    pop["h.hid.w"] = (h, d)
    pop["h.hid.b"] = (d,)
    # no bias on candidate keys: it shifts every logit equally and softmax ignores it
    pop["h.arg.w"] = (d, d)
    pop["value.w"] = (h, 1)
    pop["value.b"] = (1,)
    return shared, pop


def init_params(
    schema: Schema, cfg: Config, rng: np.random.Generator, dtype=np.float32
) -> PolicyParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) everywhere; the value head starts at zero."""
    shared_shapes, pop_shapes = param_shapes(schema, cfg)

    def draw(name: str, shape: tuple, fan_in_of_bias: dict[str, int]) -> np.ndarray:
        if name.startswith("value."):
            return np.zeros(shape, dtype=dtype)
        if name.startswith("emb.") and not name.endswith((".w", ".b")) or name.startswith("arg."):
            fan = 1  # lookup table rows act like one-hot affine maps
        elif name.endswith(".b"):
            fan = fan_in_of_bias.get(name[:-2] + ".w", 1)
        else:
            fan = shape[0]
        bound = 1.0 / np.sqrt(fan)
        return rng.uniform(-bound, bound, size=shape).astype(dtype)

    def block(shapes: dict[str, tuple]) -> dict[str, np.ndarray]:
        fans = {n: s[0] for n, s in shapes.items() if n.endswith(".w")}
        return {n: draw(n, s, fans) for n, s in shapes.items()}

    shared = block(shared_shapes)
    pops = [block(pop_shapes) for _ in range(cfg.n_populations)]
    return PolicyParams(shared, pops)


# ---------------------------------------------------------------------------
# batching


@dataclass
class ObsBatch:
    tiles: np.ndarray  # (B, T, n_tile_attrs)
    agents: np.ndarray  # (B, M, n_agent_attrs), padded
    mask: np.ndarray  # (B, M) bool

    @property
    def size(self) -> int:
        return self.tiles.shape[0]

    @classmethod
    def from_observations(cls, observations: Sequence[Observation]) -> ObsBatch:
        B = len(observations)
        M = max(o.n_agents for o in observations)
        tiles = np.stack([o.tiles for o in observations])
        n_attr = observations[0].agents.shape[1]
        agents = np.zeros((B, M, n_attr), dtype=np.float32)
        mask = np.zeros((B, M), dtype=bool)
        for i, o in enumerate(observations):
            agents[i, : o.n_agents] = o.agents
            mask[i, : o.n_agents] = True
        return cls(tiles, agents, mask)


# ---------------------------------------------------------------------------
# forward pieces


class Leaves(dict):
    """Parameter arrays wrapped as leaf tensors on first use."""

    def __init__(self, arrays: dict[str, np.ndarray], requires_grad: bool):
        super().__init__()
        self.arrays = arrays
        self.requires_grad = requires_grad

    def __missing__(self, name: str) -> Tensor:
        t = Tensor(self.arrays[name], requires_grad=self.requires_grad, name=name)
        self[name] = t
        return t


def scaled_dot_attention(queries: Tensor, keys: Tensor, values: Tensor, key_mask: np.ndarray | None = None) -> Tensor:
    """softmax(Q Kᵀ / sqrt(d)) V over the last two axes."""
    q, k, v = ad.as_tensor(queries), ad.as_tensor(keys), ad.as_tensor(values)
    d = q.shape[-1]
    if k.shape[-1] != d or k.shape[-2] != v.shape[-2]:
        raise ValueError(f"attention shape mismatch: q{q.shape} k{k.shape} v{v.shape}")
    if k.shape[-2] < 1:
        raise ValueError("attention needs at least one key")
    scores = ad.scale(ad.matmul(q, ad.swapaxes(k, -1, -2)), 1.0 / np.sqrt(d))
    weights = ad.softmax(scores, key_mask)
    return ad.matmul(weights, v)


def self_attention(x: Tensor, P: Leaves, prefix: str, key_mask: np.ndarray | None = None) -> Tensor:
    q = ad.matmul(x, P[f"{prefix}.q"])
    k = ad.matmul(x, P[f"{prefix}.k"])
    v = ad.matmul(x, P[f"{prefix}.v"])
    return scaled_dot_attention(q, k, v, key_mask)


def attribute_embeddings(X: np.ndarray, specs: Sequence[AttributeSpec], kind: str, P: Leaves) -> Tensor:
    """(N, A) raw attribute rows -> (N, A, d) attribute embeddings."""
    dtype = P.arrays["arg.move"].dtype
    ys = []
    for j, spec in enumerate(specs):
        col = X[:, j]
        if isinstance(spec.kind, Continuous):
            xn = ((col - spec.kind.mean) / spec.kind.std).astype(dtype)[:, None]
            ys.append(ad.linear(Tensor(xn), P[f"emb.{kind}.{spec.name}.w"], P[f"emb.{kind}.{spec.name}.b"]))
        else:
            idx = col.astype(np.int64) - spec.kind.min
            if (idx < 0).any() or (idx >= spec.kind.size).any():
                raise ValueError(f"attribute {spec.name} outside its discrete range")
            ys.append(ad.take_rows(P[f"emb.{kind}.{spec.name}"], idx))
    return ad.stack(ys, axis=1)


def discrete_keys(X: np.ndarray, specs: Sequence[AttributeSpec]) -> np.ndarray:
    """Mixed-radix integer key per row of an all-discrete entity type."""
    key = np.zeros(X.shape[0], dtype=np.int64)
    for j, spec in enumerate(specs):
        key = key * spec.kind.size + (X[:, j].astype(np.int64) - spec.kind.min)
    return key


def all_discrete_rows(specs: Sequence[AttributeSpec]) -> np.ndarray:
    """Every attribute combination, ordered so that row k has discrete key k."""
    grids = np.indices([s.kind.size for s in specs]).reshape(len(specs), -1).T
    return (grids + np.array([s.kind.min for s in specs])).astype(np.float32)


def entity_table(specs: Sequence[AttributeSpec], kind: str, params: dict[str, np.ndarray]) -> np.ndarray:
    """Embeddings of every possible entity of an all-discrete type (inference only)."""
    with ad.no_grad():
        return _embed_rows(all_discrete_rows(specs), specs, kind, Leaves(params, False)).data


def embed_entities(X: np.ndarray, specs: Sequence[AttributeSpec], kind: str, P: Leaves) -> Tensor:
    """Entity embeddings z: attribute self-attention (f) then mean over attributes."""
    if X.shape[0] == 0:
        raise ValueError("no entities to embed")
    if all(not isinstance(s.kind, Continuous) for s in specs):
        # Discrete-only entities repeat heavily (tiles): embed each distinct row once.
        key = discrete_keys(X, specs)
        uniq, first, inverse = np.unique(key, return_index=True, return_inverse=True)
        if len(uniq) < X.shape[0]:
            z_unique = _embed_rows(X[first], specs, kind, P)
            return ad.take_rows(z_unique, inverse.reshape(-1))
    return _embed_rows(X, specs, kind, P)


def _embed_rows(X: np.ndarray, specs: Sequence[AttributeSpec], kind: str, P: Leaves) -> Tensor:
    Y = attribute_embeddings(X, specs, kind, P)
    return ad.mean(self_attention(Y, P, "f"), axis=1)


def embed_entity(attributes: np.ndarray, kind: str, schema: Schema, P: Leaves) -> Tensor:
    """Single-entity convenience wrapper returning a (d,) embedding."""
    if kind not in ("tile", "agent"):
        raise ValueError(f"unknown entity kind {kind!r}")
    z = _embed_rows(np.asarray(attributes, dtype=np.float32)[None, :], schema.entity(kind), kind, P)
    return ad.reshape(z, (z.shape[-1],))


@dataclass
class Embedded:
    o: Tensor  # (B, hidden) flat observation embedding
    z_agents: Tensor  # (B, M, d)
    z_tiles: Tensor  # (B, T, d)
    mask: np.ndarray


def embed_batch(
    batch: ObsBatch, schema: Schema, cfg: Config, P: Leaves, tile_table: np.ndarray | None = None
) -> Embedded:
    B, T, _ = batch.tiles.shape
    M = batch.agents.shape[1]
    d = cfg.embed_dim
    if T != schema.n_tiles:
        raise ValueError(f"expected {schema.n_tiles} tile entities, got {T}")
    if M < 1 or M > schema.agent_cap or not batch.mask[:, 0].all():
        raise ValueError("every observation needs the observer entity and at most agent_cap agents")

    tile_rows = batch.tiles.reshape(B * T, -1)
    if tile_table is not None:
        z_tiles = ad.reshape(ad.take_rows(Tensor(tile_table), discrete_keys(tile_rows, schema.tile)), (B, T, d))
    else:
        z_tiles = ad.reshape(embed_entities(tile_rows, schema.tile, "tile", P), (B, T, d))
    z_agents = ad.reshape(embed_entities(batch.agents.reshape(B * M, -1), schema.agent, "agent", P), (B, M, d))

    mixed = self_attention(z_agents, P, "g", key_mask=batch.mask[:, None, :])
    agent_summary = ad.masked_mean(mixed, batch.mask, axis=1)

    if cfg.tile_aggregator == "conv":
        grid = ad.reshape(z_tiles, (B, schema.crop, schema.crop, d))
        c1 = ad.relu(ad.conv2d(grid, P["conv1.w"], P["conv1.b"]))
        c2 = ad.relu(ad.conv2d(c1, P["conv2.w"], P["conv2.b"]))
        flat = ad.reshape(c2, (B, -1))
    else:
        flat = ad.mean(z_tiles, axis=1)
    tile_summary = ad.relu(ad.linear(flat, P["tile.w"], P["tile.b"]))

    o = ad.relu(ad.linear(ad.concat([agent_summary, tile_summary], axis=1), P["obs.w"], P["obs.b"]))
    return Embedded(o=o, z_agents=z_agents, z_tiles=z_tiles, mask=batch.mask)


def embed_observation(
    obs: Observation, params: dict[str, np.ndarray], schema: Schema, cfg: Config
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Flat embedding o of one observation plus the entity embedding of every agent."""
    with ad.no_grad():
        emb = embed_batch(ObsBatch.from_observations([obs]), schema, cfg, Leaves(params, False))
    return emb.o.data[0], list(emb.z_agents.data[0])


def hidden_state(o: Tensor, P: Leaves) -> Tensor:
    h1 = ad.relu(ad.linear(o, P["mlp1.w"], P["mlp1.b"]))
    return ad.relu(ad.linear(h1, P["mlp2.w"], P["mlp2.b"]))


def key_logits(hidden: Tensor, candidates: Tensor, P: Leaves) -> Tensor:
    """Similarity logits between the keyed hidden state and keyed candidates.

    ``hidden`` is (B, h); ``candidates`` is (B, K, d) or (K, d) shared by the batch.
    """
    q = ad.linear(hidden, P["h.hid.w"], P["h.hid.b"])  # (B, d)
    keys = ad.matmul(candidates, P["h.arg.w"])
    d = q.shape[-1]
    if keys.data.ndim == 2:
        logits = ad.matmul(q, ad.swapaxes(keys, 0, 1))
    else:
        logits = ad.reshape(ad.matmul(keys, ad.reshape(q, (q.shape[0], d, 1))), (q.shape[0], keys.shape[1]))
    return ad.scale(logits, 1.0 / np.sqrt(d))


def sample_rows(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One inverse-CDF draw per row."""
    u = rng.random(probs.shape[0])
    cdf = np.cumsum(probs.astype(np.float64), axis=1)
    idx = (cdf < u[:, None] * cdf[:, -1:]).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


def select_arguments(
    hidden, candidates, params: dict[str, np.ndarray] | Leaves, rng: np.random.Generator
) -> tuple[int, float, np.ndarray]:
    """Hard attention over candidate argument embeddings for one hidden state."""
    P = params if isinstance(params, Leaves) else Leaves(params, requires_grad=False)
    cand = np.asarray(candidates.data if isinstance(candidates, Tensor) else candidates)
    if cand.ndim != 2 or cand.shape[0] < 1:
        raise ValueError("select_arguments needs at least one candidate")
    h = ad.as_tensor(hidden)
    h = ad.reshape(h, (1, h.shape[-1]))
    with ad.no_grad():
        logits = key_logits(h, Tensor(cand.astype(h.data.dtype)), P)
        logp = ad.log_softmax(logits).data[0]
    dist = np.exp(logp.astype(np.float64))
    dist /= dist.sum()
    index = int(sample_rows(dist[None, :], rng)[0])
    return index, float(logp[index]), dist


# ---------------------------------------------------------------------------
# full pass


@dataclass
class ForwardTrace:
    embedded: Embedded
    hidden: Tensor
    logp_move: Tensor  # (B, 5) log-probabilities
    logp_style: Tensor  # (B, 3)
    logp_target: Tensor  # (B, M) index 0 = null target
    target_mask: np.ndarray
    actions: np.ndarray  # (B, 3) chosen (move, style, target) indices
    log_prob: Tensor  # (B,) total log-probability of the chosen actions
    component_log_probs: np.ndarray  # (B, 3)
    value: Tensor  # (B,)
    entropy: Tensor | None
    leaves: Leaves

    @property
    def o(self) -> Tensor:
        return self.embedded.o


def forward_batch(
    batch: ObsBatch,
    params: dict[str, np.ndarray],
    schema: Schema,
    cfg: Config,
    rng: np.random.Generator | None = None,
    actions: np.ndarray | None = None,
    requires_grad: bool = True,
    with_entropy: bool = False,
    tile_table: np.ndarray | None = None,
) -> ForwardTrace:
    """Run the network on a batch; sample actions with ``rng`` unless ``actions`` is given.

    ``tile_table`` (from :func:`entity_table`) replaces the tile embedding pass when
    acting; gradients then do not reach the tile embedders or f.
    """
    P = Leaves(params, requires_grad)
    emb = embed_batch(batch, schema, cfg, P, tile_table)
    H = hidden_state(emb.o, P)

    move_logits = key_logits(H, P["arg.move"], P)
    style_logits = key_logits(H, P["arg.style"], P)
    B, M = batch.mask.shape
    null = ad.broadcast_to(ad.reshape(P["arg.null"], (1, 1, -1)), (B, 1, cfg.embed_dim))
    if M > 1:
        cands = ad.concat([null, _slice_agents(emb.z_agents)], axis=1)
    else:
        cands = null
    target_mask = batch.mask.copy()
    target_mask[:, 0] = True
    target_logits = key_logits(H, cands, P)

    lp_move = ad.log_softmax(move_logits)
    lp_style = ad.log_softmax(style_logits)
    lp_target = ad.log_softmax(target_logits, target_mask)

    if actions is None:
        if rng is None:
            raise ValueError("sampling needs an rng")
        actions = np.stack(
            [
                sample_rows(np.exp(lp_move.data), rng),
                sample_rows(np.exp(lp_style.data), rng),
                sample_rows(np.where(target_mask, np.exp(lp_target.data), 0.0), rng),
            ],
            axis=1,
        )
    actions = np.asarray(actions, dtype=np.int64)
    parts = [ad.pick(lp_move, actions[:, 0]), ad.pick(lp_style, actions[:, 1]), ad.pick(lp_target, actions[:, 2])]
    log_prob = ad.add(ad.add(parts[0], parts[1]), parts[2])
    value = ad.reshape(ad.linear(H, P["value.w"], P["value.b"]), (B,))

    entropy = None
    if with_entropy:
        ents = []
        for lp, mask in ((lp_move, None), (lp_style, None), (lp_target, target_mask)):
            p = ad.softmax(lp, mask) if mask is not None else ad.softmax(lp)
            ents.append(ad.scale(ad.sum_(ad.mul(p, lp), axis=1), -1.0))
        entropy = ad.add(ad.add(ents[0], ents[1]), ents[2])

    return ForwardTrace(
        embedded=emb,
        hidden=H,
        logp_move=lp_move,
        logp_style=lp_style,
        logp_target=lp_target,
        target_mask=target_mask,
        actions=actions,
        log_prob=log_prob,
        component_log_probs=np.stack([p.data for p in parts], axis=1),
        value=value,
        entropy=entropy,
        leaves=P,
    )


def _slice_agents(z_agents: Tensor) -> Tensor:
    """Drop the observer (index 0) from the agent entity axis."""
    B, M, d = z_agents.shape
    idx = np.arange(1, M)

    def bw(g):
        grad = np.zeros_like(z_agents.data)
        grad[:, idx] = g
        z_agents.accumulate(grad)

    return ad._make(z_agents.data[:, 1:], (z_agents,), bw)


def to_bundle(obs: Observation, action: np.ndarray) -> ActionBundle:
    move, style, target = (int(a) for a in action)
    if target == 0:
        return ActionBundle(move=Move(move))
    if obs.agent_ids is None:
        raise ValueError("observation has no entity ids to resolve the target")
    return ActionBundle(move=Move(move), attack=Attack(Style(style), obs.agent_ids[target]))


def forward(
    obs: Observation, params: dict[str, np.ndarray], schema: Schema, cfg: Config, rng: np.random.Generator
) -> tuple[ActionBundle, ForwardTrace]:
    trace = forward_batch(ObsBatch.from_observations([obs]), params, schema, cfg, rng=rng)
    return to_bundle(obs, trace.actions[0]), trace


def backward(
    trace: ForwardTrace,
    loss_grads: dict[str, np.ndarray],
    params: dict[str, np.ndarray] | None = None,
) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of a loss given d loss / d outputs.

    ``loss_grads`` may seed ``log_prob``, ``value`` and ``entropy`` (each shape (B,)).
    Every tensor in ``params`` (default: the ones used by the trace) gets a gradient,
    zero where the loss does not depend on it.
    """
    P = trace.leaves
    names = list(params) if params is not None else list(P.arrays)
    for name in names:
        if name in P and P[name].data is not (params or P.arrays)[name]:
            raise ValueError(f"trace was built with a different tensor for {name}")
    for t in P.values():
        t.grad = None
    seeds = []
    for key, tensor in (("log_prob", trace.log_prob), ("value", trace.value), ("entropy", trace.entropy)):
        if key in loss_grads and tensor is not None:
            seeds.append((tensor, loss_grads[key]))
    ad.backward(seeds)
    grads = {}
    for name in names:
        t = P.get(name)
        if t is not None and t.grad is not None:
            grads[name] = t.grad
        else:
            arr = (params or P.arrays)[name]
            grads[name] = np.zeros_like(arr)
    return grads
