"""TCP transport: each worker is a separate process serving envelopes on a socket.

The caller keeps one connection per worker and a reader thread per connection that
resolves pending futures by sequence number. A heartbeat thread pings every worker;
after ``max_missed`` unanswered pings the worker is evicted and its pending calls fail.
"""

from __future__ import annotations

import logging
import multiprocessing as mp
import os
import socket
import struct
import threading
import time
from concurrent.futures import Future, ThreadPoolExecutor
from typing import Any, Callable, Sequence

from .node import DEFAULT_TIMEOUT, Dispatcher, LayerNode
from .protocol import HEADER, Envelope, Layer, Verb

log = logging.getLogger(__name__)

HEARTBEAT_INTERVAL = 5.0
MAX_MISSED = 3


def bind_host() -> str:
    return os.environ.get("ASCEND_BIND", "127.0.0.1")


def recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(min(n - len(buf), 1 << 20))
        if not chunk:
            raise ConnectionError("connection closed")
        buf += chunk
    return bytes(buf)


def recv_envelope(sock: socket.socket) -> bytes:
    head = recv_exact(sock, HEADER.size)
    (length,) = struct.unpack_from("<I", head)
    return head + recv_exact(sock, length) if length else head


def _serve(factory: Callable[[], Any], layer: Layer, conn_out, host: str) -> None:
    """Worker process body: build the target, accept one caller, answer until it hangs up."""
    target = factory()
    dispatcher = Dispatcher(target, layer)
    listener = socket.create_server((host, 0))
    conn_out.send(listener.getsockname()[1])
    conn_out.close()
    sock, _ = listener.accept()
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    lock = threading.Lock()
    calls = ThreadPoolExecutor(max_workers=1)  # calls run one at a time, in arrival order

    def answer(data: bytes) -> None:
        reply = dispatcher(data)
        try:
            with lock:
                sock.sendall(reply)
        except OSError:
            pass  # caller went away

    try:
        while True:
            data = recv_envelope(sock)
            if Envelope.decode(data).verb == Verb.HEARTBEAT:
                # answered by the reader so a long call does not look like a dead worker
                answer(data)
            else:
                calls.submit(answer, data)
    except (ConnectionError, OSError):
        pass
    finally:
        calls.shutdown(wait=False, cancel_futures=True)
        sock.close()
        listener.close()


class _Channel:
    def __init__(self, sock: socket.socket, index: int):
        self.sock = sock
        self.index = index
        self.pending: dict[int, Future] = {}
        self.lock = threading.Lock()
        self.alive = True
        self.missed = 0
        self.last_heartbeat_reply = time.monotonic()


class TcpTransport:
    def __init__(
        self,
        addresses: Sequence[tuple[str, int]],
        heartbeat_interval: float = HEARTBEAT_INTERVAL,
        max_missed: int = MAX_MISSED,
        worker_layer: Layer = Layer.SERVER,
    ):
        self.channels: list[_Channel] = []
        self.worker_layer = worker_layer
        for i, (host, port) in enumerate(addresses):
            sock = socket.create_connection((host, port))
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            ch = _Channel(sock, i)
            self.channels.append(ch)
            threading.Thread(target=self._reader, args=(ch,), daemon=True).start()
        self.sent: list[Envelope] = []
        self.evicted: list[int] = []
        self._closing = False
        self._hb_seq = 0
        self.heartbeat_interval = heartbeat_interval
        self.max_missed = max_missed
        if heartbeat_interval > 0:
            threading.Thread(target=self._heartbeat, daemon=True).start()

    def __len__(self) -> int:
        return len(self.channels)

    def _fail(self, ch: _Channel, reason: str) -> None:
        with ch.lock:
            ch.alive = False
            pending, ch.pending = ch.pending, {}
        for fut in pending.values():
            if not fut.done():
                fut.set_exception(ConnectionError(f"worker {ch.index}: {reason}"))

    def _reader(self, ch: _Channel) -> None:
        try:
            while True:
                env = Envelope.decode(recv_envelope(ch.sock))
                if env.verb == Verb.HEARTBEAT:
                    ch.missed = 0
                    ch.last_heartbeat_reply = time.monotonic()
                    continue
                with ch.lock:
                    fut = ch.pending.pop(env.seq, None)
                if fut is not None and not fut.done():
                    fut.set_result(env)
        except (ConnectionError, OSError) as exc:
            if not self._closing:
                log.warning("worker %d connection lost: %s", ch.index, exc)
            self._fail(ch, "connection lost")

    def _heartbeat(self) -> None:
        while not self._closing:
            time.sleep(self.heartbeat_interval)
            for ch in self.channels:
                if not ch.alive:
                    continue
                ch.missed += 1
                if ch.missed > self.max_missed:
                    log.warning("worker %d missed %d heartbeats; evicted", ch.index, self.max_missed)
                    self.evicted.append(ch.index)
                    self._fail(ch, "evicted after missed heartbeats")
                    continue
                self._hb_seq += 1
                try:
                    with ch.lock:
                        ch.sock.sendall(Envelope(Verb.HEARTBEAT, self.worker_layer, ch.index, self._hb_seq).encode())
                except OSError:
                    self._fail(ch, "heartbeat send failed")

    def send(self, worker: int, envelope: Envelope) -> Future:
        ch = self.channels[worker]
        fut: Future = Future()
        self.sent.append(envelope)
        with ch.lock:
            if not ch.alive:
                fut.set_exception(ConnectionError(f"worker {worker} is not alive"))
                return fut
            ch.pending[envelope.seq] = fut
            try:
                ch.sock.sendall(envelope.encode())
            except OSError as exc:
                ch.pending.pop(envelope.seq, None)
                fut.set_exception(ConnectionError(f"worker {worker}: send failed: {exc}"))
        return fut

    def close(self) -> None:
        self._closing = True
        for ch in self.channels:
            try:
                ch.sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            ch.sock.close()


class WorkerPool:
    """Spawns worker processes and connects a TCP transport to them."""

    def __init__(
        self,
        factories: Sequence[Callable[[], Any]],
        layer: Layer,
        heartbeat_interval: float = HEARTBEAT_INTERVAL,
        max_missed: int = MAX_MISSED,
    ):
        ctx = mp.get_context("fork")
        host = bind_host()
        self.processes = []
        addresses = []
        for factory in factories:
            parent, child = ctx.Pipe(duplex=False)
            proc = ctx.Process(target=_serve, args=(factory, layer, child, host), daemon=True)
            proc.start()
            child.close()
            if not parent.poll(30):
                raise RuntimeError("worker process did not report its port")
            addresses.append((host, parent.recv()))
            self.processes.append(proc)
        self.transport = TcpTransport(addresses, heartbeat_interval, max_missed, worker_layer=layer)

    def node(self, role: Layer, timeout: float = DEFAULT_TIMEOUT) -> LayerNode:
        return LayerNode(role, self.transport, len(self.processes), timeout)

    def close(self) -> None:
        self.transport.close()
        for p in self.processes:
            p.join(timeout=2)
            if p.is_alive():
                p.terminate()
                p.join(timeout=2)

    def __enter__(self) -> WorkerPool:
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def connect(addresses: Sequence[str], role: Layer = Layer.CLUSTER, timeout: float = DEFAULT_TIMEOUT) -> LayerNode:
    """Node over already-running workers listed as ``host:port`` strings."""
    parsed = []
    for a in addresses:
        host, _, port = a.rpartition(":")
        parsed.append((host, int(port)))
    transport = TcpTransport(parsed, worker_layer=Layer(role + 1))
    return LayerNode(role, transport, len(parsed), timeout)
