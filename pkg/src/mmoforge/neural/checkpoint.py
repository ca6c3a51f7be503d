"""Parameter checkpoint file.

Layout (little-endian)::

    4s   magic b"MMOF"
    u8   format version (1)
    u8   observation schema version
    16s  architecture digest (config fields that fix tensor shapes or observation meaning)
    u16  population count
    u32  tensor count
    per tensor, in PolicyParams.named_tensors() order:
        u16 name length, name (utf-8), u8 ndim, ndim x u32 dims, float32 data
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from ..config import Config
from ..obsio import SCHEMA_VERSION
from .network import PolicyParams

MAGIC = b"MMOF"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sBB16sHI")


class CheckpointError(ValueError):
    pass


# Fields that change tensor shapes or what an observation means. Runtime knobs
# (seed, batch size, learning rate, map size, spawn cap) are free to differ.
ARCHITECTURE_FIELDS = (
    "embed_dim", "hidden_dim", "n_populations", "obs_crop", "obs_agent_cap", "tile_aggregator",
    "food_max", "water_max", "health_max", "progression",
)


def architecture_digest(cfg: Config) -> bytes:
    d = cfg.to_dict()
    picked = {k: v for k, v in d.items() if k.split(".")[0] in ARCHITECTURE_FIELDS}
    blob = json.dumps(picked, sort_keys=True).encode()
    return hashlib.sha256(blob).digest()[:16]


def dumps(params: PolicyParams, cfg: Config) -> bytes:
    tensors = list(params.named_tensors())
    out = bytearray(
        HEADER.pack(MAGIC, FORMAT_VERSION, SCHEMA_VERSION, architecture_digest(cfg), params.n_populations, len(tensors))
    )
    for name, arr in tensors:
        raw = name.encode()
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return bytes(out)


def loads(data: bytes, cfg: Config | None = None) -> PolicyParams:
    """Parse a checkpoint; with ``cfg`` given, refuse one written under another config."""
    if len(data) < HEADER.size:
        raise CheckpointError("truncated checkpoint header")
    magic, version, schema_version, digest, n_pop, n_tensors = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if schema_version != SCHEMA_VERSION:
        raise CheckpointError(f"checkpoint schema version {schema_version} != {SCHEMA_VERSION}")
    if cfg is not None and digest != architecture_digest(cfg):
        raise CheckpointError("checkpoint was written for a different network or observation layout")
    offset = HEADER.size
    params = PolicyParams({}, [{} for _ in range(n_pop)])
    try:
        for _ in range(n_tensors):
            (n,) = struct.unpack_from("<H", data, offset)
            offset += 2
            name = data[offset : offset + n].decode()
            offset += n
            (ndim,) = struct.unpack_from("<B", data, offset)
            offset += 1
            shape = struct.unpack_from(f"<{ndim}I", data, offset)
            offset += 4 * ndim
            count = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(shape)
            offset += 4 * count
            params.set(name, arr.astype(np.float32))
    except (struct.error, ValueError, IndexError) as exc:
        raise CheckpointError(f"truncated or corrupt checkpoint: {exc}") from exc
    if offset != len(data):
        raise CheckpointError("trailing bytes after the last tensor")
    return params


def save(path: str | Path, params: PolicyParams, cfg: Config) -> None:
    Path(path).write_bytes(dumps(params, cfg))


def load(path: str | Path, cfg: Config | None = None) -> PolicyParams:
    return loads(Path(path).read_bytes(), cfg)
