"""Reverse-mode automatic differentiation over float64 numpy arrays.

Each op builds a Tensor node holding the forward value and a closure that
maps the output gradient to the inputs' gradients (hand-derived, exact).
`backward` runs an iterative topological sweep from a scalar loss; every
analytic formula here is checked against finite differences in the tests.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (inference speed-up)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A float64 array plus the bookkeeping needed for backpropagation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False,
                 parents: tuple = (), backward_fn: Callable | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward_fn = backward_fn

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def constant(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64))


def _make(data: np.ndarray, parents: Sequence[Tensor],
          backward_fn: Callable) -> Tensor:
    req = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if not req:
        return Tensor(data)
    return Tensor(data, requires_grad=True, parents=tuple(parents),
                  backward_fn=backward_fn)


def backward(root: Tensor) -> None:
    """Backpropagate from a scalar root through the recorded graph."""
    if root.data.size != 1:
        raise ValueError("backward requires a scalar root")
    if not root.requires_grad:
        raise ValueError("root does not require gradients")
    # iterative postorder; recursion would overflow on deep graphs
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    root.grad = np.ones_like(root.data)
    for node in reversed(topo):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- arithmetic -------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(out, (a, b), bwd)


def scale(a: Tensor, s: float) -> Tensor:
    out = a.data * s

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * s)

    return _make(out, (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting on leading axes."""
    out = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accumulate(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accumulate(_unbroadcast(gb, b.data.shape))

    return _make(out, (a, b), bwd)


def transpose_last(a: Tensor) -> Tensor:
    return swapaxes(a, -1, -2)


def swapaxes(a: Tensor, axis1: int, axis2: int) -> Tensor:
    out = np.swapaxes(a.data, axis1, axis2)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(np.swapaxes(g, axis1, axis2))

    return _make(out, (a,), bwd)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = a.data.reshape(shape)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.data.shape))

    return _make(out, (a,), bwd)


# -- indexing ---------------------------------------------------------------

def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: out[..., :] = table[ids[...], :]."""
    ids = np.asarray(ids)
    out = table.data[ids]

    def bwd(g):
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, ids, g)

    return _make(out, (table,), bwd)


def gather_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """Select rows of a 2-D tensor: out[i] = a[index[i]]."""
    index = np.asarray(index)
    out = a.data[index]

    def bwd(g):
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            np.add.at(a.grad, index, g)

    return _make(out, (a,), bwd)


# -- nonlinearities ---------------------------------------------------------

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit (tanh form), differentiated exactly."""
    x = a.data
    u = _GELU_C * (x + _GELU_A * x ** 3)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def bwd(g):
        if a.requires_grad:
            du = _GELU_C * (1.0 + 3.0 * _GELU_A * x ** 2)
            a._accumulate(g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * du))

    return _make(out, (a,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply learned gain and bias."""
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = gain.data * xhat + bias.data

    def bwd(g):
        if bias.requires_grad:
            bias._accumulate(_unbroadcast(g, bias.data.shape))
        if gain.requires_grad:
            gain._accumulate(_unbroadcast(g * xhat, gain.data.shape))
        if x.requires_grad:
            gx = g * gain.data
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            x._accumulate(inv * (gx - m1 - xhat * m2))

    return _make(out, (x, gain, bias), bwd)


def softmax_masked(scores: Tensor, additive_mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis of (scores + additive_mask).

    The mask is a constant array broadcastable to scores; disallowed slots
    carry a large negative value whose exp underflows to exactly 0.
    """
    z = scores.data if additive_mask is None else scores.data + additive_mask
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        if scores.requires_grad:
            dot = (g * p).sum(axis=-1, keepdims=True)
            scores._accumulate(p * (g - dot))

    return _make(p, (scores,), bwd)


def dropout(a: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; p = 0 is an exact identity (consumes no randomness)."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if p == 0.0:
        return a
    keep = (rng.random(a.data.shape) >= p) / (1.0 - p)
    out = a.data * keep

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * keep)

    return _make(out, (a,), bwd)


# -- loss -------------------------------------------------------------------

IGNORE_INDEX = -100


def cross_entropy(logits: Tensor, labels: np.ndarray,
                  ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Mean negative log-likelihood of `labels` under row-wise softmax.

    logits: (N, V); labels: (N,) ints, rows equal to ignore_index excluded.
    Raises if every label is ignored.
    """
    labels = np.asarray(labels)
    if logits.data.ndim != 2 or labels.shape != (logits.data.shape[0],):
        raise ValueError("cross_entropy expects (N, V) logits and (N,) labels")
    kept = labels != ignore_index
    n_kept = int(kept.sum())
    if n_kept == 0:
        raise ValueError("cross_entropy: all labels are ignored")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    rows = np.nonzero(kept)[0]
    nll = -logp[rows, labels[rows]]
    out = np.asarray(nll.sum() / n_kept)

    def bwd(g):
        if logits.requires_grad:
            gl = np.zeros_like(logits.data)
            p = np.exp(logp[rows])
            p[np.arange(len(rows)), labels[rows]] -= 1.0
            gl[rows] = p * (float(g) / n_kept)
            logits._accumulate(gl)

    return _make(out, (logits,), bwd)


def log_probs(logits: Tensor) -> np.ndarray:
    """Row-wise log-softmax of a (N, V) logits tensor, as a plain array."""
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
