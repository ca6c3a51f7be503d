import os
import sys
import threading
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import small_config
from mmoforge.ascend import (
    Envelope,
    Layer,
    ProtocolError,
    Verb,
    WorkerFailure,
    distribute,
    inprocess_node,
    shard,
    step,
    synchronize,
)
from mmoforge.ascend.mmo import (
    ClientWorker,
    GradientPacket,
    ServerWorker,
    build_stack,
    merge_packets,
    packet_digest,
    quantize,
    run_cluster_epoch,
)
from mmoforge.ascend.node import Dispatcher, LayerNode
from mmoforge.ascend.protocol import HEADER, pack_call
from mmoforge.ascend.tcp import WorkerPool
from mmoforge.config import seed_rng
from mmoforge.neural.network import init_params
from mmoforge.obsio import build_schema
from mmoforge.trainer import Rollout


class Squarer:
    def step(self, xs):
        return [x * x for x in xs]

    def echo(self, *args):
        return list(args)

    def pid(self):
        return os.getpid()

    def nap(self, seconds):
        time.sleep(seconds)
        return "woke"

    def boom(self):
        raise RuntimeError("kaboom")

    def die(self):
        os._exit(3)


class Gated:
    def __init__(self, gate: threading.Event):
        self.gate = gate

    def step(self):
        self.gate.wait(5)
        return 1


# ---------------------------------------------------------------------------
# sharding


def test_shard_examples():
    A = object()
    out = shard([A, [1, 2, 3, 4]], [1], 2)
    assert out == [[A, [1, 2]], [A, [3, 4]]] and out[1][0] is A
    assert [len(w[1]) for w in shard([A, [1, 2, 3]], [1], 2)] == [2, 1]
    same = shard([A, [1, 2]], None, 3)
    assert all(w == [A, [1, 2]] for w in same)


def test_shard_errors():
    with pytest.raises(TypeError):
        shard([5], [0], 2)
    with pytest.raises(TypeError):
        shard([b"abc"], [0], 2)
    with pytest.raises(ValueError):
        shard([[1]], [0], 0)
    with pytest.raises(ValueError):
        shard([[1]], [3], 1)


@given(seq=st.lists(st.integers(), max_size=60), n=st.integers(1, 12))
def test_shard_reassembly_identity(seq, n):
    parts = [w[0] for w in shard([seq], [0], n)]
    assert [x for p in parts for x in p] == seq
    sizes = [len(p) for p in parts]
    assert len(parts) == n and max(sizes) - min(sizes) <= 1 and sizes == sorted(sizes, reverse=True)


# ---------------------------------------------------------------------------
# envelope


def test_envelope_layout_bit_exact():
    env = Envelope(Verb.CALL, Layer.SERVER, 7, 2**40 + 3, b"xyz")
    data = env.encode()
    assert HEADER.size == 19
    assert data[:4] == (3).to_bytes(4, "little")
    assert data[4] == 1
    assert data[5:7] == (1).to_bytes(2, "little")
    assert data[7:11] == (7).to_bytes(4, "little")
    assert data[11:19] == (2**40 + 3).to_bytes(8, "little")
    assert data[19:] == b"xyz"
    assert Envelope.decode(data) == env


@given(
    verb=st.sampled_from(list(Verb)),
    layer=st.integers(0, 2**16 - 1),
    worker=st.integers(0, 2**32 - 1),
    seq=st.integers(0, 2**64 - 1),
    payload=st.binary(max_size=200),
)
def test_envelope_round_trip(verb, layer, worker, seq, payload):
    env = Envelope(verb, layer, worker, seq, payload)
    assert Envelope.decode(env.encode()) == env


def test_envelope_decode_errors():
    data = Envelope(Verb.RETURN, 1, 0, 1, b"abcd").encode()
    with pytest.raises(ProtocolError):
        Envelope.decode(data[:10])
    with pytest.raises(ProtocolError):
        Envelope.decode(data[:-1])
    with pytest.raises(ProtocolError):
        Envelope.decode(data[:4] + b"\x09" + data[5:])


def test_layer_isolation():
    d = Dispatcher(Squarer(), Layer.CLIENT)
    wrong = Envelope(Verb.CALL, Layer.SERVER, 0, 1, pack_call("step", [[1]])).encode()
    with pytest.raises(ProtocolError):
        d(wrong)
    with pytest.raises(ProtocolError):
        inprocess_node(Layer.CLIENT, [])
    with pytest.raises(ProtocolError):
        LayerNode(Layer.CLIENT, None, 0).worker_layer
    right = Envelope.decode(d(Envelope(Verb.CALL, Layer.CLIENT, 0, 1, pack_call("_secret", [])).encode()))
    assert right.verb == Verb.ERROR


def test_every_message_addresses_the_adjacent_layer():
    node = inprocess_node(Layer.SERVER, [Squarer(), Squarer()])
    step(node, [[1, 2, 3]], (0,))
    step(node, [[4]], None, "echo")
    assert node.transport.sent and all(e.layer == Layer.CLIENT for e in node.transport.sent)


# ---------------------------------------------------------------------------
# distribute / synchronize / step


def test_echo_worker_end_to_end():
    node = inprocess_node(Layer.SERVER, [Squarer(), Squarer()])
    assert synchronize(distribute(node, [[1, 2, 3, 4]], (0,))) == [[1, 4], [9, 16]]
    assert synchronize([]) == []
    assert distribute(inprocess_node(Layer.SERVER, []), [[1]], (0,)) == []


def test_distribute_does_not_block():
    gate = threading.Event()
    node = inprocess_node(Layer.SERVER, [Gated(gate) for _ in range(4)])
    handles = distribute(node)
    assert len(handles) == 4 and not any(h.done() for h in handles)
    assert [h.worker for h in handles] == [0, 1, 2, 3]
    gate.set()
    assert synchronize(handles) == [1, 1, 1, 1]


def test_double_await_is_an_error():
    node = inprocess_node(Layer.SERVER, [Squarer()])
    (h,) = distribute(node, [[2]], (0,))
    assert h.wait() == [4]
    with pytest.raises(RuntimeError):
        h.wait()


def test_failures_are_contained():
    node = inprocess_node(Layer.SERVER, [Squarer(), Squarer(), Squarer()])
    out = step(node, [], None, "boom")
    assert all(isinstance(r, WorkerFailure) and r.kind == "error" and "kaboom" in r.message for r in out)
    assert not out[0]


def test_timeout_marks_only_the_slow_worker():
    class Mixed(Squarer):
        def __init__(self, slow):
            self.slow = slow

        def step(self, xs):
            if self.slow:
                time.sleep(1.0)
            return super().step(xs)

    node = inprocess_node(Layer.SERVER, [Mixed(False), Mixed(True), Mixed(False)], timeout=0.3)
    out = step(node, [[1, 2, 3]], (0,))
    assert out[0] == [1] and out[2] == [9]
    assert isinstance(out[1], WorkerFailure) and out[1].kind == "timeout"


@settings(max_examples=25, deadline=None)
@given(xs=st.lists(st.integers(-1000, 1000), max_size=30), n=st.integers(1, 5))
def test_step_equals_synchronize_of_distribute(xs, n):
    node = inprocess_node(Layer.SERVER, [Squarer() for _ in range(n)])
    a = step(node, [xs], (0,))
    b = synchronize(distribute(node, [xs], (0,)))
    c = step(node, [xs], (0,))
    assert a == b == c
    node.close()


def test_sequence_numbers_increase_per_channel():
    node = inprocess_node(Layer.SERVER, [Squarer(), Squarer()])
    for _ in range(5):
        step(node, [[1, 2]], (0,))
    for w in (0, 1):
        seqs = [e.seq for e in node.transport.sent if e.worker == w]
        assert seqs == sorted(set(seqs)) and len(seqs) == 5


# ---------------------------------------------------------------------------
# TCP transport


def test_tcp_echo_and_process_isolation():
    with WorkerPool([Squarer] * 3, Layer.SERVER, heartbeat_interval=0) as pool:
        node = pool.node(Layer.CLUSTER)
        assert step(node, [list(range(7))], (0,)) == [[0, 1, 4], [9, 16], [25, 36]]
        pids = step(node, [], None, "pid")
        assert len(set(pids)) == 3 and os.getpid() not in pids


def test_tcp_crash_contained():
    with WorkerPool([Squarer] * 3, Layer.SERVER, heartbeat_interval=0) as pool:
        node = pool.node(Layer.CLUSTER, timeout=10)
        handles = distribute(node, [[1, 2, 3]], (0,))
        crash = distribute(LayerNode(Layer.CLUSTER, _OnlyWorker(pool.transport, 1), 1, 10), [], None, "die")
        res = synchronize(handles)
        assert res[0] == [1] and res[2] == [9]
        assert isinstance(synchronize(crash, 10)[0], WorkerFailure)
        after = step(node, [[1, 2, 3]], (0,))
        assert after[0] == [1] and after[2] == [9] and isinstance(after[1], WorkerFailure)
        assert after[1].kind == "transport"


class _OnlyWorker:
    """Route worker 0 of a one-worker node to a chosen worker of a pool transport."""

    def __init__(self, transport, index):
        self.transport, self.index = transport, index

    def send(self, worker, envelope):
        return self.transport.send(self.index, Envelope(envelope.verb, envelope.layer, self.index, 10_000 + envelope.seq, envelope.payload))

    def close(self):
        pass


def test_tcp_heartbeat_evicts_stuck_worker():
    class Wedged(Squarer):
        def step(self, xs):
            # hog the interpreter so the worker's heartbeat reader never runs
            sys.setswitchinterval(1000)
            t0 = time.time()
            while time.time() - t0 < 30:
                pass
            return xs

    with WorkerPool([Squarer, Wedged], Layer.SERVER, heartbeat_interval=0.1, max_missed=3) as pool:
        node = pool.node(Layer.CLUSTER, timeout=10)
        t0 = time.monotonic()
        out = step(node, [[1, 2]], (0,))
        assert out[0] == [1]
        assert isinstance(out[1], WorkerFailure) and "evicted" in out[1].message
        assert time.monotonic() - t0 < 5 and 1 in pool.transport.evicted


# ---------------------------------------------------------------------------
# training stack


def _stack_cfg():
    return small_config().replace(spawn_region="center", batch_actions=128)


def _trajectories(cfg, n_actions=240, seed=0):
    params = init_params(build_schema(cfg), cfg, seed_rng(seed, "init"))
    return Rollout(cfg, params, seed=seed).collect(n_actions)


def test_quantized_sum_is_order_free():
    rng = np.random.default_rng(0)
    gs = [rng.normal(size=50) * 10.0 ** rng.integers(-6, 2) for _ in range(20)]
    packets = [GradientPacket({"x": quantize(g)}, 1) for g in gs]
    a = packet_digest(merge_packets(packets))
    b = packet_digest(merge_packets(packets[::-1]))
    c = packet_digest(merge_packets([merge_packets(packets[:7]), merge_packets(packets[7:])]))
    assert a == b == c


def test_aggregation_equivalence_2x2_vs_1x1():
    cfg = _stack_cfg()
    trajs = _trajectories(cfg)
    big = build_stack(cfg, 2, 2, seed=0)
    one = build_stack(cfg, 1, 1, seed=0)
    try:
        assert big.params.digest() == one.params.digest()
        half = len(trajs) // 2
        m_big = run_cluster_epoch(big, trajectories=[trajs[:half], trajs[half:]])
        m_one = run_cluster_epoch(one, trajectories=[trajs])
        assert m_big["params_digest"] == m_one["params_digest"]
        assert m_big["n_actions"] == m_one["n_actions"] == sum(len(t) for t in trajs)
        # every client in the big stack holds the fresh parameters
        assert len(m_big["client_digests"]) == 4 and set(m_big["client_digests"]) == {m_big["params_digest"]}
    finally:
        big.close()
        one.close()


def test_collect_epoch_keeps_clients_in_step():
    cfg = _stack_cfg()
    cluster = build_stack(cfg, 2, 2, seed=1)
    try:
        for _ in range(2):
            m = run_cluster_epoch(cluster)
            assert m["servers"] == 2 and m["n_actions"] >= cfg.batch_actions
            assert set(m["client_digests"]) == {cluster.params.digest()}
        assert cluster.optim.step == 2
    finally:
        cluster.close()


class _CrashingClient(ClientWorker):
    def gradients(self, trajectories):
        raise RuntimeError("injected client failure")


def test_client_crash_does_not_corrupt_siblings():
    cfg = _stack_cfg()
    trajs = _trajectories(cfg, seed=2)
    params = init_params(build_schema(cfg), cfg, seed_rng(0, "init"))
    healthy = ServerWorker(cfg, 0, 2, clients=[ClientWorker(cfg, 0, params), ClientWorker(cfg, 1, params)])
    broken = ServerWorker(cfg, 0, 2, clients=[ClientWorker(cfg, 0, params), _CrashingClient(cfg, 1, params)])
    half = (len(trajs) + 1) // 2
    ref = ServerWorker(cfg, 0, 1, clients=[ClientWorker(cfg, 0, params)]).gradients(trajs[:half])
    got = broken.gradients(trajs)
    assert packet_digest(got) == packet_digest(ref) and got.n_actions == ref.n_actions
    assert packet_digest(healthy.gradients(trajs)) != packet_digest(ref)


def test_failed_server_dropped_with_incident():
    cfg = _stack_cfg()
    trajs = _trajectories(cfg, seed=3)
    cluster = build_stack(cfg, 2, 1, seed=0)
    try:
        cluster.servers[1].inject = None  # calling it now raises TypeError inside the worker
        m = run_cluster_epoch(cluster, trajectories=[trajs, trajs])
        assert m["servers"] == 1 and cluster.incidents and "server 1" in cluster.incidents[0]
    finally:
        cluster.close()


@pytest.mark.slow
def test_distributed_stack_matches_threaded():
    cfg = _stack_cfg()
    trajs = _trajectories(cfg, seed=4)
    half = len(trajs) // 2
    local = build_stack(cfg, 2, 2, seed=0)
    remote = build_stack(cfg, 2, 2, seed=0, distributed=True)
    try:
        a = run_cluster_epoch(local, trajectories=[trajs[:half], trajs[half:]])
        b = run_cluster_epoch(remote, trajectories=[trajs[:half], trajs[half:]])
        assert a["params_digest"] == b["params_digest"]
        assert set(b["client_digests"]) == {b["params_digest"]}
    finally:
        local.close()
        remote.close()
