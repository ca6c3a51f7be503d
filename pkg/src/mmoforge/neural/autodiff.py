"""A minimal reverse-mode autodiff tape over numpy arrays.

Each op returns a :class:`Tensor` holding its parents and a closure that pushes the
output gradient back to them. :func:`backward` seeds one or more outputs and walks the
graph in reverse topological order.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import sparse

class _GradMode(threading.local):
    enabled = True


# per thread: client workers differentiate concurrently inside one process
_grad_mode = _GradMode()


def grad_enabled() -> bool:
    return _grad_mode.enabled


@contextlib.contextmanager
def no_grad():
    prev = _grad_mode.enabled
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, name={self.name})"

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    # sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data)
    if _grad_mode.enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    def bw(g):
        a.accumulate(g * c)

    return _make(a.data * c, (a,), bw)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bw(g):
        a.accumulate(g * mask)

    return _make(a.data * mask, (a,), bw)


def square(a: Tensor) -> Tensor:
    def bw(g):
        a.accumulate(2.0 * g * a.data)

    return _make(a.data * a.data, (a,), bw)


# ---------------------------------------------------------------------------
# linear algebra and reductions


def matmul(a, b) -> Tensor:
    """``a @ b`` with numpy batching; 1-D operands are not supported."""
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            if a.data.ndim > 2 and b.data.ndim == 2:
                # fold the batch into rows: (…, n, k)ᵀ @ (…, n, m) summed over the batch
                k, m = a.data.shape[-1], g.shape[-1]
                b.accumulate(a.data.reshape(-1, k).T @ g.reshape(-1, m))
            else:
                b.accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(a.data @ b.data, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` over the last axis of ``x``."""
    return add(matmul(x, w), b)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a.accumulate(np.broadcast_to(g, a.shape))

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def mean(a: Tensor, axis: int) -> Tensor:
    return scale(sum_(a, axis=axis), 1.0 / a.shape[axis])


def masked_mean(a: Tensor, mask: np.ndarray, axis: int) -> Tensor:
    """Mean of ``a`` over ``axis`` counting only entries where ``mask`` is true.

    ``mask`` has ``a``'s shape without the trailing feature axis.
    """
    m = mask.astype(a.data.dtype)[..., None]
    counts = np.maximum(m.sum(axis=axis, keepdims=True), 1.0)
    w = m / counts
    return sum_(mul(a, w), axis=axis)


def reshape(a: Tensor, shape) -> Tensor:
    def bw(g):
        a.accumulate(g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), bw)


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    def bw(g):
        a.accumulate(np.swapaxes(g, i, j))

    return _make(np.swapaxes(a.data, i, j), (a,), bw)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                p.accumulate(g[tuple(idx)])

    return _make(np.concatenate([p.data for p in parts], axis=axis), parts, bw)


def stack(parts: Sequence[Tensor], axis: int) -> Tensor:
    expanded = [reshape(p, p.shape[:axis] + (1,) + p.shape[axis:]) for p in parts]
    return concat(expanded, axis)


def broadcast_to(a: Tensor, shape) -> Tensor:
    def bw(g):
        a.accumulate(_unbroadcast(g, a.shape))

    return _make(np.broadcast_to(a.data, shape).copy(), (a,), bw)


_SCATTER_DENSE_MAX = 4096


def take_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """``table[index]`` for an integer index array of any shape (embedding lookup)."""
    index = np.asarray(index, dtype=np.int64)

    def bw(g):
        flat_index = index.reshape(-1)
        flat = g.reshape(-1, table.shape[-1]) if table.data.ndim > 1 else g.reshape(-1)
        if flat_index.size > _SCATTER_DENSE_MAX:
            # a sparse one-hot product is several times faster than ufunc.at for big batches
            onehot = sparse.csr_matrix(
                (np.ones(flat_index.size, dtype=g.dtype), (flat_index, np.arange(flat_index.size))),
                shape=(table.shape[0], flat_index.size),
            )
            grad = np.asarray(onehot @ flat).reshape(table.shape)
        else:
            grad = np.zeros_like(table.data)
            np.add.at(grad, flat_index, flat)
        table.accumulate(grad)

    return _make(table.data[index], (table,), bw)


def pick(a: Tensor, index: np.ndarray) -> Tensor:
    """``a[i, index[i]]`` for a 2-D tensor."""
    rows = np.arange(a.shape[0])
    index = np.asarray(index, dtype=np.int64)

    def bw(g):
        grad = np.zeros_like(a.data)
        grad[rows, index] = g
        a.accumulate(grad)

    return _make(a.data[rows, index], (a,), bw)


# ---------------------------------------------------------------------------
# softmax family


def _masked_logits(x: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    if mask is None:
        return x
    return np.where(mask, x, -np.inf)


def softmax(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; masked-out entries get probability exactly 0."""
    z = _masked_logits(a.data, mask)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        a.accumulate(s * (g - (g * s).sum(axis=-1, keepdims=True)))

    return _make(s, (a,), bw)


def log_softmax(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    z = _masked_logits(a.data, mask)
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    s = np.exp(out)
    if mask is not None:
        out = np.where(mask, out, 0.0).astype(a.data.dtype)

    def bw(g):
        if mask is not None:
            g = np.where(mask, g, 0.0)
        a.accumulate(g - s * g.sum(axis=-1, keepdims=True))

    return _make(out, (a,), bw)


# ---------------------------------------------------------------------------
# convolution


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 2, pad: int = 1) -> Tensor:
    """3x3 (or kxk) convolution on channels-last input ``(B, H, W, C)``.

    ``w`` has shape ``(k*k*C, C_out)`` with rows ordered (ki, kj, c).
    """
    B, H, W, C = x.shape
    k = int(round(np.sqrt(w.shape[0] // C)))
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    cols = np.empty((B, Ho, Wo, k, k, C), dtype=x.data.dtype)
    for ki in range(k):
        for kj in range(k):
            cols[:, :, :, ki, kj, :] = xp[:, ki : ki + stride * Ho : stride, kj : kj + stride * Wo : stride, :]
    flat = cols.reshape(B * Ho * Wo, k * k * C)
    out = (flat @ w.data + b.data).reshape(B, Ho, Wo, -1)

    def bw(g):
        g2 = g.reshape(B * Ho * Wo, -1)
        if w.requires_grad:
            w.accumulate(flat.T @ g2)
        if b.requires_grad:
            b.accumulate(g2.sum(axis=0))
        if x.requires_grad:
            gcols = (g2 @ w.data.T).reshape(B, Ho, Wo, k, k, C)
            gxp = np.zeros_like(xp)
            for ki in range(k):
                for kj in range(k):
                    gxp[:, ki : ki + stride * Ho : stride, kj : kj + stride * Wo : stride, :] += gcols[:, :, :, ki, kj, :]
            x.accumulate(gxp[:, pad : pad + H, pad : pad + W, :])

    return _make(out, (x, w, b), bw)


# ---------------------------------------------------------------------------
# driver


def _topo(roots: Iterable[Tensor]) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    for root in roots:
        stack = [(root, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def backward(seeds: Sequence[tuple[Tensor, np.ndarray]]) -> None:
    """Accumulate gradients into every leaf reachable from the seeded outputs."""
    roots = []
    for t, g in seeds:
        if not t.requires_grad:
            continue
        t.accumulate(np.broadcast_to(np.asarray(g, dtype=t.data.dtype), t.shape))
        roots.append(t)
    for node in reversed(_topo(roots)):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            # interior gradients are not needed once propagated
            node.grad = None
