"""Tape-free acting path: one forward pass for a batch mixing several populations.

Per-population tensors are stacked and gathered per observation, so a tick with agents
from all eight populations costs a single call instead of one per population. The math
is the same as :func:`network.forward_batch`; the test suite checks the two agree.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..config import Config
from ..obsio import Continuous, Schema
from .network import ObsBatch, PolicyParams, discrete_keys, entity_table, sample_rows


def _softmax(x: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(x: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    x = x - x.max(axis=-1, keepdims=True)
    out = x - np.log(np.exp(x).sum(axis=-1, keepdims=True))
    return out if mask is None else np.where(mask, out, 0.0)


def _attend(x: np.ndarray, Wq, Wk, Wv, key_mask=None) -> np.ndarray:
    """Self-attention over axis -2 of ``x`` (B, ..., n, d) with per-batch weights (B, d, d)."""
    B = x.shape[0]
    shp = x.shape
    flat = x.reshape(B, -1, shp[-1])
    q = (flat @ Wq).reshape(shp)
    k = (flat @ Wk).reshape(shp)
    v = (flat @ Wv).reshape(shp)
    scores = (q @ np.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(shp[-1]))
    return _softmax(scores, key_mask) @ v


def _conv(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    """3x3 stride-2 pad-1 convolution with per-batch weights W (B, 9C, Cout)."""
    B, H, Wd, C = x.shape
    Ho, Wo = (H - 1) // 2 + 1, (Wd - 1) // 2 + 1
    xp = np.zeros((B, H + 2, Wd + 2, C), dtype=x.dtype)
    xp[:, 1:-1, 1:-1] = x
    cols = np.empty((B, Ho, Wo, 3, 3, C), dtype=x.dtype)
    for ki in range(3):
        for kj in range(3):
            cols[:, :, :, ki, kj, :] = xp[:, ki : ki + 2 * Ho : 2, kj : kj + 2 * Wo : 2, :]
    out = cols.reshape(B, Ho * Wo, 9 * C) @ W + b[:, None, :]
    return out.reshape(B, Ho, Wo, -1)


@dataclass
class ActResult:
    actions: np.ndarray  # (B, 3)
    log_prob: np.ndarray  # (B,)
    value: np.ndarray  # (B,)


class StackedPolicy:
    """Inference view of all populations at one parameter version."""

    def __init__(self, params: PolicyParams, schema: Schema, cfg: Config):
        self.params = params
        self.version = params.version
        self.schema = schema
        self.cfg = cfg
        names = params.populations[0].keys()
        self.stacked = {n: np.stack([blk[n] for blk in params.populations]) for n in names}
        self.shared = params.shared
        self.tile_tables = np.stack(
            [entity_table(schema.tile, "tile", params.view(p)) for p in range(params.n_populations)]
        )

    def _agent_attrs(self, X: np.ndarray) -> np.ndarray:
        """(B, M, A) attribute rows -> (B, M, A, d) attribute embeddings (shared embedders)."""
        ys = []
        dtype = self.shared["arg.move"].dtype
        for j, spec in enumerate(self.schema.agent):
            col = X[..., j]
            base = f"emb.agent.{spec.name}"
            if isinstance(spec.kind, Continuous):
                xn = ((col - spec.kind.mean) / spec.kind.std).astype(dtype)[..., None]
                ys.append(xn * self.shared[f"{base}.w"][0] + self.shared[f"{base}.b"])
            else:
                ys.append(self.shared[base][col.astype(np.int64) - spec.kind.min])
        return np.stack(ys, axis=-2)

    def act(self, batch: ObsBatch, pops: np.ndarray, rng: np.random.Generator) -> ActResult:
        S = {n: a[pops] for n, a in self.stacked.items()}
        cfg, schema = self.cfg, self.schema
        B, M = batch.mask.shape
        d = cfg.embed_dim
        mask = batch.mask

        keys = discrete_keys(batch.tiles.reshape(B * schema.n_tiles, -1), schema.tile).reshape(B, -1)
        z_tiles = self.tile_tables[pops[:, None], keys]  # (B, T, d)

        Y = self._agent_attrs(batch.agents)  # (B, M, A, d)
        z_agents = _attend(Y, S["f.q"], S["f.k"], S["f.v"]).mean(axis=-2)  # (B, M, d)
        mixed = _attend(z_agents, S["g.q"], S["g.k"], S["g.v"], key_mask=mask[:, None, :])
        w = mask.astype(mixed.dtype)
        agent_summary = (mixed * w[..., None]).sum(axis=1) / w.sum(axis=1, keepdims=True)

        if cfg.tile_aggregator == "conv":
            grid = z_tiles.reshape(B, schema.crop, schema.crop, d)
            c1 = np.maximum(_conv(grid, S["conv1.w"], S["conv1.b"]), 0)
            c2 = np.maximum(_conv(c1, S["conv2.w"], S["conv2.b"]), 0)
            flat = c2.reshape(B, -1)
        else:
            flat = z_tiles.mean(axis=1)

        def lin(x, name):
            return (x[:, None, :] @ S[f"{name}.w"])[:, 0, :] + S[f"{name}.b"]

        tile_summary = np.maximum(lin(flat, "tile"), 0)
        o = np.maximum(lin(np.concatenate([agent_summary, tile_summary], axis=1), "obs"), 0)
        H = np.maximum(lin(np.maximum(lin(o, "mlp1"), 0), "mlp2"), 0)
        q = lin(H, "h.hid")  # (B, d)
        scale = 1.0 / np.sqrt(d)

        def logits(cands):  # cands (B, K, d)
            return ((cands @ S["h.arg.w"]) @ q[:, :, None])[..., 0] * scale

        move_c = np.broadcast_to(self.shared["arg.move"], (B, *self.shared["arg.move"].shape))
        style_c = np.broadcast_to(self.shared["arg.style"], (B, *self.shared["arg.style"].shape))
        null = np.broadcast_to(self.shared["arg.null"], (B, 1, d))
        target_c = np.concatenate([null, z_agents[:, 1:]], axis=1)
        target_mask = mask.copy()
        target_mask[:, 0] = True

        lp_move = _log_softmax(logits(move_c))
        lp_style = _log_softmax(logits(style_c))
        lp_target = _log_softmax(logits(target_c), target_mask)
        actions = np.stack(
            [
                sample_rows(np.exp(lp_move), rng),
                sample_rows(np.exp(lp_style), rng),
                sample_rows(np.where(target_mask, np.exp(lp_target), 0.0), rng),
            ],
            axis=1,
        )
        rows = np.arange(B)
        log_prob = lp_move[rows, actions[:, 0]] + lp_style[rows, actions[:, 1]] + lp_target[rows, actions[:, 2]]
        value = lin(H, "value")[:, 0]
        return ActResult(actions=actions, log_prob=log_prob, value=value)
