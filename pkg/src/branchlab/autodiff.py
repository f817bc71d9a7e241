"""Minimal reverse-accumulation tape over numpy arrays.

Covers exactly the operations the bipartite network needs: dense matmul,
broadcast add, relu, row gather/scatter, reductions, and a stable logsumexp.
Gradients are exact (up to the stated relu/indicator subgradient choices) and
evaluated in a fixed order, so results are reproducible.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    __slots__ = ("value", "grad", "parents", "bwd")

    def __init__(self, value, parents=(), bwd=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.bwd = bwd          # fn(out_grad) -> tuple of parent gradients

    @property
    def shape(self):
        return self.value.shape


def const(value) -> Tensor:
    return Tensor(value)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        return g @ b.value.T, a.value.T @ g

    return Tensor(a.value @ b.value, (a, b), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)

    return Tensor(a.value + b.value, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape)

    return Tensor(a.value - b.value, (a, b), bwd)


def mul_const(a: Tensor, c: float) -> Tensor:
    return Tensor(a.value * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0.0
    return Tensor(a.value * mask, (a,), lambda g: (g * mask,))


def square(a: Tensor) -> Tensor:
    return Tensor(a.value**2, (a,), lambda g: (2.0 * a.value * g,))


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    def bwd(g):
        out = np.zeros_like(a.value)
        np.add.at(out, idx, g)
        return (out,)

    return Tensor(a.value[idx], (a,), bwd)


def scatter_sum(a: Tensor, idx: np.ndarray, num_rows: int) -> Tensor:
    out = np.zeros((num_rows,) + a.value.shape[1:])
    np.add.at(out, idx, a.value)
    return Tensor(out, (a,), lambda g: (g[idx],))


def mean_rows(a: Tensor) -> Tensor:
    n = max(a.value.shape[0], 1)

    def bwd(g):
        return (np.broadcast_to(g / n, a.value.shape).copy(),)

    return Tensor(a.value.mean(axis=0, keepdims=True) if a.value.shape[0] else
                  np.zeros((1,) + a.value.shape[1:]), (a,), bwd)


def sum_all(a: Tensor) -> Tensor:
    def bwd(g):
        return (np.full_like(a.value, float(g)),)

    return Tensor(a.value.sum(), (a,), bwd)


def add_n(tensors: list[Tensor]) -> Tensor:
    def bwd(g):
        return tuple(g for _ in tensors)

    return Tensor(sum(t.value for t in tensors), tuple(tensors), bwd)


def pick(a: Tensor, index: int) -> Tensor:
    def bwd(g):
        out = np.zeros_like(a.value)
        out.reshape(-1)[index] = float(g)
        return (out,)

    return Tensor(a.value.reshape(-1)[index], (a,), bwd)


def logsumexp(a: Tensor) -> Tensor:
    """Stable log-sum-exp of a 1-D tensor; gradient is the softmax."""
    v = a.value.reshape(-1)
    mx = float(v.max())
    exps = np.exp(v - mx)
    total = float(exps.sum())
    softmax = (exps / total).reshape(a.value.shape)

    def bwd(g):
        return (softmax * float(g),)

    return Tensor(mx + np.log(total), (a,), bwd)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to the shape of a broadcast operand."""
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def backward(root: Tensor) -> None:
    """Accumulate gradients of root w.r.t. every tensor in its graph."""
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
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))

    root.grad = np.ones_like(root.value)
    for node in reversed(topo):
        if node.bwd is None or node.grad is None:
            continue
        grads = node.bwd(node.grad)
        for parent, g in zip(node.parents, grads):
            g = np.asarray(g, dtype=np.float64)
            if parent.grad is None:
                parent.grad = g.copy() if g.base is not None or g is node.grad else g
            else:
                parent.grad = parent.grad + g
