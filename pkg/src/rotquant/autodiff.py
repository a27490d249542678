"""Minimal tape-free reverse-mode autodiff over numpy arrays.

Each :class:`Var` keeps its parents and a closure mapping the output cotangent
to parent cotangents. ``backward`` walks the graph in reverse topological
order. Only the handful of ops the toy transformer needs are provided; every
op accepts plain arrays as constants.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import linalg


class Var:
    __slots__ = ("value", "grad", "parents", "vjp")

    def __init__(self, value, parents: Sequence["Var"] = (), vjp: Callable | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.parents = tuple(parents)
        self.vjp = vjp

    @property
    def shape(self):
        return self.value.shape

    @property
    def T(self) -> "Var":
        return swapaxes(self, -1, -2)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __repr__(self):
        return f"Var(shape={self.value.shape})"


def value(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _is_var(x) -> bool:
    return isinstance(x, Var)


def _make(out, inputs, vjp) -> Var | np.ndarray:
    """Wrap ``out`` in a Var only when some input is differentiable."""
    parents = [x for x in inputs if _is_var(x)]
    if not parents:
        return out
    return Var(out, inputs, vjp)


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b):
    av, bv = value(a), value(b)
    return _make(av + bv, (a, b), lambda g: (unbroadcast(g, av.shape), unbroadcast(g, bv.shape)))


def neg(a):
    return _make(-value(a), (a,), lambda g: (-g,))


def mul(a, b):
    av, bv = value(a), value(b)
    return _make(av * bv, (a, b), lambda g: (unbroadcast(g * bv, av.shape), unbroadcast(g * av, bv.shape)))


def matmul(a, b):
    av, bv = value(a), value(b)

    def vjp(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return unbroadcast(ga, av.shape), unbroadcast(gb, bv.shape)

    return _make(av @ bv, (a, b), vjp)


def swapaxes(a, i: int, j: int):
    return _make(np.swapaxes(value(a), i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def transpose(a, axes: Sequence[int]):
    inv = np.argsort(axes)
    return _make(np.transpose(value(a), axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a, shape):
    src = value(a).shape
    return _make(value(a).reshape(shape), (a,), lambda g: (g.reshape(src),))


def mean_last(a):
    av = value(a)
    n = av.shape[-1]
    return _make(av.mean(axis=-1, keepdims=True), (a,), lambda g: (np.broadcast_to(g / n, av.shape),))


def rsqrt(a, eps: float = 0.0):
    """(a + eps)^(-1/2)."""
    out = 1.0 / np.sqrt(value(a) + eps)
    return _make(out, (a,), lambda g: (-0.5 * g * out**3,))


def silu(a):
    av = value(a)
    s = 1.0 / (1.0 + np.exp(-av))
    return _make(av * s, (a,), lambda g: (g * (s + av * s * (1.0 - s)),))


def inv(a):
    """Matrix inverse of a square 2-D input (partial-pivot solve)."""
    out = linalg.inverse(value(a))
    return _make(out, (a,), lambda g: (-out.T @ g @ out.T,))


def take_rows(table, ids: np.ndarray):
    """``table[ids]`` (embedding lookup)."""
    tv = value(table)

    def vjp(g):
        gt = np.zeros_like(tv)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, tv.shape[-1]))
        return (gt,)

    return _make(tv[ids], (table,), vjp)


def causal_softmax(scores):
    """Softmax over the last axis with a causal (lower-triangular) mask."""
    sv = value(scores)
    t_q, t_k = sv.shape[-2:]
    mask = np.tril(np.ones((t_q, t_k), dtype=bool), k=t_k - t_q)
    z = np.where(mask, sv, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    return _make(p, (scores,), lambda g: (p * (g - (g * p).sum(axis=-1, keepdims=True)),))


def cross_entropy(logits, targets: np.ndarray, weight: float = 1.0):
    """Sum over positions of −log softmax(logits)[target], times ``weight``."""
    lv = value(logits)
    flat = lv.reshape(-1, lv.shape[-1])
    tg = targets.reshape(-1)
    m = flat.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(flat - m).sum(axis=-1))
    loss = weight * float(np.sum(lse - flat[np.arange(tg.size), tg]))

    def vjp(g):
        p = np.exp(flat - lse[:, None])
        p[np.arange(tg.size), tg] -= 1.0
        return ((g * weight) * p.reshape(lv.shape),)

    return _make(np.asarray(loss), (logits,), vjp)


def linear_op(a, fwd: Callable, adj: Callable):
    """Apply a fixed linear map ``fwd`` whose adjoint is ``adj``."""
    return _make(fwd(value(a)), (a,), lambda g: (adj(g),))


def straight_through(a, out: np.ndarray, mask: np.ndarray | None = None):
    """Forward value ``out``, identity (optionally masked) gradient."""
    if mask is None:
        return _make(out, (a,), lambda g: (g,))
    return _make(out, (a,), lambda g: (g * mask,))


def backward(root: Var, seed: np.ndarray | float = 1.0) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every reachable Var."""
    order: list[Var] = []
    seen: set[int] = set()
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
        for p in node.parents:
            if _is_var(p) and id(p) not in seen:
                stack.append((p, False))
    root.grad = np.broadcast_to(np.asarray(seed, dtype=np.float64), root.value.shape).copy()
    for node in reversed(order):
        if node.vjp is None or node.grad is None:
            continue
        grads = node.vjp(node.grad)
        for p, g in zip(node.parents, grads):
            if not _is_var(p):
                continue
            g = np.asarray(g, dtype=np.float64)
            p.grad = g.copy() if p.grad is None else p.grad + g
        if node is not root:
            node.grad = None  # intermediate cotangents are not kept
