"""Envelope wire format and argument sharding.

Envelope layout (little-endian)::

    u32 payload length | u8 verb | u16 layer id | u32 worker id | u64 sequence | payload

The layer id names the layer the message is addressed to (or, for replies, the layer
that produced it); a node only accepts messages for its own layer.
"""

from __future__ import annotations

import pickle
import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import Any, Sequence

HEADER = struct.Struct("<IBHIQ")


class Verb(IntEnum):
    CALL = 1
    RETURN = 2
    ERROR = 3
    HEARTBEAT = 4


class Layer(IntEnum):
    CLUSTER = 0
    SERVER = 1
    CLIENT = 2


class ProtocolError(ValueError):
    pass


@dataclass(frozen=True)
class Envelope:
    verb: Verb
    layer: int
    worker: int
    seq: int
    payload: bytes = b""

    def encode(self) -> bytes:
        return HEADER.pack(len(self.payload), int(self.verb), self.layer, self.worker, self.seq) + self.payload

    @classmethod
    def decode(cls, data: bytes) -> Envelope:
        if len(data) < HEADER.size:
            raise ProtocolError("truncated envelope header")
        length, verb, layer, worker, seq = HEADER.unpack_from(data)
        if len(data) != HEADER.size + length:
            raise ProtocolError(f"length field {length} != payload size {len(data) - HEADER.size}")
        try:
            verb = Verb(verb)
        except ValueError as exc:
            raise ProtocolError(f"unknown verb {verb}") from exc
        return cls(verb, layer, worker, seq, bytes(data[HEADER.size :]))


def pack_call(method: str, args: Sequence[Any]) -> bytes:
    return pickle.dumps((method, list(args)), protocol=pickle.HIGHEST_PROTOCOL)


def unpack_call(payload: bytes) -> tuple[str, list]:
    method, args = pickle.loads(payload)
    return method, args


def pack_value(value: Any) -> bytes:
    return pickle.dumps(value, protocol=pickle.HIGHEST_PROTOCOL)


def unpack_value(payload: bytes) -> Any:
    return pickle.loads(payload)


ShardSpec = frozenset


def shard(arguments: Sequence[Any], spec: Sequence[int] | None, n_workers: int) -> list[list[Any]]:
    """Split the sequence arguments at ``spec`` positions into contiguous chunks.

    Chunk sizes differ by at most one, earlier workers getting the extra items.
    Other arguments are replicated by reference; ``spec=None`` replicates everything.
    """
    if n_workers < 1:
        raise ValueError("n_workers must be >= 1")
    positions = set(spec or ())
    for i in positions:
        if not 0 <= i < len(arguments):
            raise ValueError(f"shard position {i} out of range")
        if not hasattr(arguments[i], "__len__") or not hasattr(arguments[i], "__getitem__") or isinstance(
            arguments[i], (str, bytes)
        ):
            raise TypeError(f"argument {i} is not a sequence and cannot be sharded")
    out = [list(arguments) for _ in range(n_workers)]
    for i in positions:
        seq = arguments[i]
        base, extra = divmod(len(seq), n_workers)
        lo = 0
        for w in range(n_workers):
            hi = lo + base + (1 if w < extra else 0)
            out[w][i] = seq[lo:hi]
            lo = hi
    return out
