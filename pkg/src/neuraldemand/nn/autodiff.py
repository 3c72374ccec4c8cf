"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`GradientTape` records every operation as a node holding its value,
the indices of its parents and a vector-Jacobian product closure. Nodes are
appended in execution order, which is already a topological order, so the
backward sweep is a single reverse pass visiting each node once.

Only first derivatives are supported. Input derivatives needed inside a loss
are taken by central differences on the inputs, with every perturbed forward
pass recorded on the same tape (see :mod:`neuraldemand.nn.mlp`).
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import kernels

__all__ = [
    "ContractError",
    "DimensionError",
    "GradientTape",
    "Var",
]


class DimensionError(ValueError):
    """Operand shapes do not chain."""


class ContractError(RuntimeError):
    """An operation was used outside its contract."""


class _Node:
    __slots__ = ("value", "parents", "vjp")

    def __init__(self, value, parents, vjp):
        self.value = value
        self.parents = parents
        self.vjp = vjp


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Var:
    """Handle to a node on a tape. Supports the arithmetic the models need."""

    __slots__ = ("tape", "idx")
    __array_priority__ = 100.0

    def __init__(self, tape: "GradientTape", idx: int):
        self.tape = tape
        self.idx = idx

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.idx].value

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(#{self.idx}, shape={self.shape})"

    def _lift(self, other) -> "Var":
        return other if isinstance(other, Var) else self.tape.constant(other)

    def __add__(self, other):
        return add(self, self._lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(self._lift(other)))

    def __rsub__(self, other):
        return add(self._lift(other), neg(self))

    def __mul__(self, other):
        return mul(self, self._lift(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Var):
            return mul(self, reciprocal(other))
        return mul(self, self.tape.constant(1.0 / np.asarray(other, dtype=float)))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, self._lift(other))

    def __getitem__(self, key):
        return getitem(self, key)


class GradientTape:
    """Records operations for one forward pass and runs the backward sweep."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self):
        return len(self.nodes)

    def record(self, value: np.ndarray, parents: Sequence[Var], vjp: Callable | None) -> Var:
        self.nodes.append(_Node(value, tuple(p.idx for p in parents), vjp))
        return Var(self, len(self.nodes) - 1)

    def variable(self, value) -> Var:
        """A differentiable leaf."""
        return self.record(np.asarray(value, dtype=np.float64), (), None)

    def constant(self, value) -> Var:
        return self.record(np.asarray(value, dtype=np.float64), (), None)

    def gradient(self, root: Var, sources: Sequence[Var]) -> list[np.ndarray]:
        """Gradients of the scalar ``root`` with respect to each of ``sources``.

        Sources the root does not depend on get zero gradients.
        """
        if root.tape is not self:
            raise ContractError("root was recorded on a different tape")
        if root.value.size != 1:
            raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
        grads: list[np.ndarray | None] = [None] * (root.idx + 1)
        grads[root.idx] = np.ones_like(root.value)
        for i in range(root.idx, -1, -1):
            g = grads[i]
            if g is None:
                continue
            node = self.nodes[i]
            if node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None:
                    continue
                if grads[parent] is None:
                    grads[parent] = pg
                else:
                    grads[parent] = grads[parent] + pg
        out = []
        for s in sources:
            g = grads[s.idx] if s.idx <= root.idx else None
            out.append(np.zeros_like(s.value) if g is None else g)
        return out


# ---------------------------------------------------------------------------
# operations


def add(a: Var, b: Var) -> Var:
    sa, sb = a.shape, b.shape
    return a.tape.record(
        a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
    )


def neg(a: Var) -> Var:
    return a.tape.record(-a.value, (a,), lambda g: (-g,))


def mul(a: Var, b: Var) -> Var:
    av, bv = a.value, b.value
    return a.tape.record(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def reciprocal(a: Var) -> Var:
    r = 1.0 / a.value
    return a.tape.record(r, (a,), lambda g: (-g * r * r,))


def matmul(a: Var, b: Var) -> Var:
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise DimensionError(f"cannot multiply {av.shape} by {bv.shape}")
    return a.tape.record(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def dense(x: Var, w: Var, b: Var) -> Var:
    """``x @ w + b`` as one node."""
    xv, wv = x.value, w.value
    if xv.ndim != 2 or xv.shape[1] != wv.shape[0]:
        raise DimensionError(f"input width {xv.shape[-1]} does not match layer {wv.shape}")
    return x.tape.record(xv @ wv + b.value, (x, w, b), lambda g: (g @ wv.T, xv.T @ g, g.sum(axis=0)))


def dense_silu(x: Var, w: Var, b: Var) -> Var:
    """``silu(x @ w + b)`` as one node, using the selected kernels."""
    xv, wv = x.value, w.value
    if xv.ndim != 2 or xv.shape[1] != wv.shape[0]:
        raise DimensionError(f"input width {xv.shape[-1]} does not match layer {wv.shape}")
    z = xv @ wv
    z += b.value
    a, sig = kernels.silu_forward(z)

    def vjp(g):
        dz = kernels.silu_backward(g, z, sig)
        return dz @ wv.T, xv.T @ dz, dz.sum(axis=0)

    return x.tape.record(a, (x, w, b), vjp)


def silu(a: Var) -> Var:
    z = a.value
    out, sig = kernels.silu_forward(np.ascontiguousarray(z))
    return a.tape.record(out, (a,), lambda g: (kernels.silu_backward(g, z, sig),))


def softmax(a: Var) -> Var:
    """Row-wise softmax of a 2-D array."""
    s = kernels.softmax_rows(a.value)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return a.tape.record(s, (a,), vjp)


def log_softmax(a: Var) -> Var:
    z = a.value
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax + np.log(np.exp(z - zmax).sum(axis=1, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return a.tape.record(out, (a,), lambda g: (g - s * g.sum(axis=1, keepdims=True),))


def relu(a: Var) -> Var:
    mask = a.value > 0
    return a.tape.record(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def square(a: Var) -> Var:
    v = a.value
    return a.tape.record(v * v, (a,), lambda g: (2.0 * g * v,))


def log(a: Var) -> Var:
    v = a.value
    return a.tape.record(np.log(v), (a,), lambda g: (g / v,))


def exp(a: Var) -> Var:
    e = np.exp(a.value)
    return a.tape.record(e, (a,), lambda g: (g * e,))


def sum(a: Var, axis=None, keepdims=False) -> Var:  # noqa: A001 - mirrors numpy
    shape = a.shape
    out = np.asarray(a.value.sum(axis=axis, keepdims=keepdims))

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return a.tape.record(out, (a,), vjp)


def mean(a: Var, axis=None) -> Var:
    n = a.value.size if axis is None else a.shape[axis]
    return sum(a, axis=axis) * (1.0 / n)


def _is_basic(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (slice, int, np.integer)) or k is None or k is Ellipsis for k in parts)


def getitem(a: Var, key) -> Var:
    shape = a.shape
    basic = _is_basic(key)

    def vjp(g):
        out = np.zeros(shape)
        if basic:  # basic indexing never repeats an element
            out[key] = g
        else:
            np.add.at(out, key, g)
        return (out,)

    return a.tape.record(np.asarray(a.value[key]), (a,), vjp)


def reshape(a: Var, shape) -> Var:
    old = a.shape
    return a.tape.record(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Var, axes=None) -> Var:
    inv = None if axes is None else np.argsort(axes)
    return a.tape.record(np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inv),))


def concat(parts: Sequence[Var], axis: int = 1) -> Var:
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]
    return parts[0].tape.record(
        np.concatenate([p.value for p in parts], axis=axis),
        tuple(parts),
        lambda g: tuple(np.split(g, cuts, axis=axis)),
    )


def take_rows(a: Var, index: np.ndarray) -> Var:
    """Gather rows (embedding lookup); gradients scatter-add back."""
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return a.tape.record(a.value[index], (a,), vjp)
