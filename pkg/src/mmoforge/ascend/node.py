"""Layer nodes, awaitable handles, and the in-process transport."""

from __future__ import annotations

import logging
import threading
import time
from concurrent.futures import Future, ThreadPoolExecutor, TimeoutError as FutureTimeout
from dataclasses import dataclass, field
from typing import Any, Protocol, Sequence

from .protocol import Envelope, Layer, ProtocolError, Verb, pack_call, pack_value, shard, unpack_call, unpack_value

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 60.0


@dataclass(frozen=True)
class WorkerFailure:
    """A per-worker error entry in synchronize results."""

    worker: int
    kind: str  # "error" | "timeout" | "transport"
    message: str

    def __bool__(self) -> bool:
        return False


class AsyncHandle:
    """An in-flight invocation; awaitable exactly once."""

    def __init__(self, worker: int, seq: int, future: Future):
        self.worker = worker
        self.seq = seq
        self._future = future
        self._awaited = False

    def done(self) -> bool:
        return self._future.done()

    def wait(self, timeout: float | None = DEFAULT_TIMEOUT) -> Any:
        if self._awaited:
            raise RuntimeError(f"handle {self.worker}:{self.seq} already awaited")
        self._awaited = True
        try:
            env: Envelope = self._future.result(timeout=timeout)
        except FutureTimeout:
            return WorkerFailure(self.worker, "timeout", f"no reply within {timeout}s")
        except Exception as exc:  # transport-level failure
            return WorkerFailure(self.worker, "transport", repr(exc))
        if env.verb == Verb.ERROR:
            return WorkerFailure(self.worker, "error", unpack_value(env.payload))
        return unpack_value(env.payload)


class Transport(Protocol):
    def send(self, worker: int, envelope: Envelope) -> Future: ...

    def close(self) -> None: ...


class Dispatcher:
    """Worker-side handler: checks the addressed layer, runs the method, builds the reply."""

    def __init__(self, target: Any, layer: Layer):
        self.target = target
        self.layer = layer

    def __call__(self, data: bytes) -> bytes:
        env = Envelope.decode(data)
        if env.layer != self.layer:
            raise ProtocolError(f"layer {self.layer.name} received a message addressed to layer {env.layer}")
        if env.verb == Verb.HEARTBEAT:
            return Envelope(Verb.HEARTBEAT, self.layer, env.worker, env.seq).encode()
        try:
            method, args = unpack_call(env.payload)
            if method.startswith("_"):
                raise AttributeError(f"method {method!r} is not callable remotely")
            value = getattr(self.target, method)(*args)
            reply = Envelope(Verb.RETURN, self.layer, env.worker, env.seq, pack_value(value))
        except Exception as exc:
            log.debug("worker %s failed: %r", env.worker, exc)
            reply = Envelope(Verb.ERROR, self.layer, env.worker, env.seq, pack_value(f"{type(exc).__name__}: {exc}"))
        return reply.encode()


class InProcessTransport:
    """Workers are plain objects served by a thread pool; every message still goes through
    the byte-level envelope codec."""

    def __init__(self, workers: Sequence[Any], layer: Layer, max_threads: int | None = None):
        self.dispatchers = [Dispatcher(w, layer) for w in workers]
        self.pool = ThreadPoolExecutor(max_workers=max_threads or max(1, len(workers)))
        self.sent: list[Envelope] = []

    def __len__(self) -> int:
        return len(self.dispatchers)

    def send(self, worker: int, envelope: Envelope) -> Future:
        self.sent.append(envelope)
        data = envelope.encode()
        dispatcher = self.dispatchers[worker]
        return self.pool.submit(lambda: Envelope.decode(dispatcher(data)))

    def close(self) -> None:
        self.pool.shutdown(wait=False, cancel_futures=True)


@dataclass
class LayerNode:
    """One Ascend layer: a role plus the transport reaching its workers one layer down."""

    role: Layer
    transport: Any
    n_workers: int
    timeout: float = DEFAULT_TIMEOUT
    _seq: dict[int, int] = field(default_factory=dict)
    _lock: threading.Lock = field(default_factory=threading.Lock)

    @property
    def worker_layer(self) -> Layer:
        if self.role == Layer.CLIENT:
            raise ProtocolError("clients have no workers")
        return Layer(self.role + 1)

    def next_seq(self, worker: int) -> int:
        with self._lock:
            s = self._seq.get(worker, 0) + 1
            self._seq[worker] = s
            return s

    def close(self) -> None:
        self.transport.close()


def distribute(
    node: LayerNode, arguments: Sequence[Any] = (), spec: Sequence[int] | None = None, method: str = "step"
) -> list[AsyncHandle]:
    """Invoke ``method`` on every worker with its shard of ``arguments``; returns at once."""
    if node.n_workers == 0:
        return []
    shards = shard(arguments, spec, node.n_workers)
    handles = []
    for w, args in enumerate(shards):
        seq = node.next_seq(w)
        env = Envelope(Verb.CALL, node.worker_layer, w, seq, pack_call(method, args))
        try:
            fut = node.transport.send(w, env)
        except Exception as exc:
            fut = Future()
            fut.set_exception(exc)
        handles.append(AsyncHandle(w, seq, fut))
    return handles


def synchronize(handles: Sequence[AsyncHandle], timeout: float | None = DEFAULT_TIMEOUT) -> list[Any]:
    """Wait for every handle; results in handle order, failures as WorkerFailure entries.

    ``timeout`` bounds the whole call, not each handle.
    """
    deadline = None if timeout is None else time.monotonic() + timeout
    out = []
    for h in handles:
        remaining = None if deadline is None else max(0.0, deadline - time.monotonic())
        out.append(h.wait(remaining))
    return out


def step(
    node: LayerNode, arguments: Sequence[Any] = (), spec: Sequence[int] | None = None, method: str = "step"
) -> list[Any]:
    return synchronize(distribute(node, arguments, spec, method), node.timeout)


def inprocess_node(role: Layer, workers: Sequence[Any], timeout: float = DEFAULT_TIMEOUT) -> LayerNode:
    if role == Layer.CLIENT:
        raise ProtocolError("clients have no workers")
    transport = InProcessTransport(workers, Layer(role + 1))
    return LayerNode(role, transport, len(workers), timeout)
