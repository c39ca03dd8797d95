"""Tape-based reverse-mode differentiation over numpy arrays.

Every op accepts plain arrays or :class:`Node` objects.  With no Node among the
operands the op is a pure numpy function and nothing is recorded, which is how
gradient-free forward passes avoid building a tape at all.  When at least one
operand is a Node the result is appended to that node's tape.

    tape = Tape()
    w = tape.leaf(np.ones(3), name="w")
    loss = reduce_sum(mul(w, w))
    grads = tape.backward(loss)
    grads[w]            # 2 * w
"""
from __future__ import annotations

import math

import numpy as np

from .errors import ContractError, InputError, ShapeError

LAYERNORM_EPS = 1e-12
_GELU_C = math.sqrt(2.0 / math.pi)


class Node:
    __slots__ = ("value", "op", "parents", "vjp", "name", "tape", "grad")

    def __init__(self, value, op, parents, vjp, tape, name=None):
        self.value = value
        self.op = op
        self.parents = parents
        self.vjp = vjp
        self.tape = tape
        self.name = name
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"<Node {self.op}{label} shape={self.value.shape}>"


class Gradients(dict):
    """Mapping Node -> gradient array, with name lookup for leaves and taps."""

    def __init__(self, grads, names):
        super().__init__(grads)
        self._names = names

    def by_name(self, name):
        return self[self._names[name]]


class Tape:
    """Forward execution record.  One backward pass per tape.

    ``Tape.constructed`` counts every tape ever created; the gradient-free
    proxies are checked against it.
    """

    constructed = 0

    def __init__(self):
        Tape.constructed += 1
        self.nodes: list[Node] = []
        self.named: dict[str, Node] = {}
        self.tags: dict[str, Node] = {}
        self._loss = None
        self._grads = None

    def leaf(self, value, name=None) -> Node:
        node = Node(np.asarray(value, dtype=np.float64), "leaf", (), None, self, name)
        self.nodes.append(node)
        if name is not None:
            self.named[name] = node
        return node

    def tap(self, name, node) -> Node:
        """Name an intermediate so its gradient is reported by :meth:`backward`."""
        self._own(node)
        self.named[name] = node
        return node

    def tag(self, name, node) -> Node:
        """Mark ``node`` as a differentiable input (used by :func:`input_jacobian`)."""
        self.tap(name, node)
        self.tags[name] = node
        return node

    def _own(self, node):
        if not isinstance(node, Node) or node.tape is not self:
            raise ContractError("node does not belong to this tape")

    def backward(self, loss: Node) -> Gradients:
        self._own(loss)
        if self._grads is not None:
            if loss is self._loss:
                return self._grads
            raise ContractError("backward already ran on this tape")
        if loss.value.size != 1:
            raise ContractError(f"loss must be scalar, got shape {loss.value.shape}")
        grads = {loss: np.ones_like(loss.value)}
        for node in reversed(self.nodes):
            g = grads.get(node)
            if g is None or node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None or not isinstance(parent, Node):
                    continue
                prev = grads.get(parent)
                grads[parent] = pg if prev is None else prev + pg
        for node in list(self.named.values()):
            if node not in grads:
                grads[node] = np.zeros_like(node.value)
        for node, g in grads.items():
            node.grad = g
        self._loss = loss
        self._grads = Gradients(grads, dict(self.named))
        return self._grads


def _value(x):
    return x.value if isinstance(x, Node) else x


def _record(op, value, parents, vjp):
    tape = None
    for p in parents:
        if isinstance(p, Node):
            if tape is None:
                tape = p.tape
            elif p.tape is not tape:
                raise ContractError("operands belong to different tapes")
    if tape is None:
        return value
    node = Node(value, op, parents, vjp, tape)
    tape.nodes.append(node)
    return node


def unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from exc


# ---------------------------------------------------------------- ops

def matmul(a, b):
    """Batched matrix product with numpy broadcasting over leading axes."""
    av, bv = _value(a), _value(b)
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul shape mismatch {av.shape} @ {bv.shape}")
    try:
        out = np.matmul(av, bv)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc

    def vjp(g):
        ga = gb = None
        if isinstance(a, Node):
            ga = unbroadcast(np.matmul(g, np.swapaxes(bv, -1, -2)), av.shape)
        if isinstance(b, Node):
            if bv.ndim == 2:
                gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = unbroadcast(np.matmul(np.swapaxes(av, -1, -2), g), bv.shape)
        return ga, gb

    return _record("matmul", out, (a, b), vjp)


def add(a, b):
    av, bv = _value(a), _value(b)
    _broadcast_shape(av, bv)
    out = av + bv
    return _record("add", out, (a, b), lambda g: (unbroadcast(g, av.shape), unbroadcast(g, bv.shape)))


def mul(a, b):
    av, bv = _value(a), _value(b)
    _broadcast_shape(av, bv)
    out = av * bv

    def vjp(g):
        return (unbroadcast(g * bv, av.shape) if isinstance(a, Node) else None,
                unbroadcast(g * av, bv.shape) if isinstance(b, Node) else None)

    return _record("mul", out, (a, b), vjp)


def scale(a, c: float):
    c = float(c)
    return _record("scale", _value(a) * c, (a,), lambda g: (g * c,))


def softmax(a):
    """Softmax over the last axis."""
    av = _value(a)
    z = av - av.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (p * (g - np.sum(g * p, axis=-1, keepdims=True)),)

    return _record("softmax", p, (a,), vjp)


def layernorm(a, eps=LAYERNORM_EPS):
    """Normalise the last axis to zero mean / unit variance (no affine part)."""
    av = _value(a)
    mu = av.mean(axis=-1, keepdims=True)
    xc = av - mu
    inv = 1.0 / np.sqrt(np.mean(xc * xc, axis=-1, keepdims=True) + eps)
    y = xc * inv

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = np.mean(g * y, axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _record("layernorm", y, (a,), vjp)


def gelu(a):
    """Tanh-approximation GELU; the gradient differentiates the same formula."""
    x = _value(a)
    u = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        du = _GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return _record("gelu", out, (a,), vjp)


def relu(a):
    x = _value(a)
    mask = x > 0.0
    return _record("relu", np.where(mask, x, 0.0), (a,), lambda g: (g * mask,))


def transpose(a, axes):
    axes = tuple(axes)
    av = _value(a)
    if sorted(axes) != list(range(av.ndim)):
        raise ShapeError(f"bad permutation {axes} for rank {av.ndim}")
    inverse = tuple(np.argsort(axes))
    return _record("transpose", np.transpose(av, axes), (a,), lambda g: (np.transpose(g, inverse),))


def reshape(a, shape):
    av = _value(a)
    try:
        out = av.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    return _record("reshape", out, (a,), lambda g: (g.reshape(av.shape),))


def embed(table, ids):
    """Row lookup ``table[ids]``; ``ids`` is a constant integer array."""
    tv = _value(table)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise InputError("embedding ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= tv.shape[0]):
        raise InputError(f"embedding id out of range [0, {tv.shape[0]})")
    out = tv[ids]

    def vjp(g):
        gt = np.zeros_like(tv)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, tv.shape[-1]))
        return (gt,)

    return _record("embed", out, (table,), vjp)


def reduce_sum(a, axis=None, keepdims=False):
    av = _value(a)
    out = np.sum(av, axis=axis, keepdims=keepdims)
    out = np.asarray(out)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, av.shape).copy(),)

    return _record("reduce_sum", out, (a,), vjp)


def backward(tape: Tape, loss: Node) -> Gradients:
    return tape.backward(loss)


def input_jacobian(tape: Tape, loss: Node, inputs: Node) -> np.ndarray:
    """Row n = d loss / d inputs[n], flattened.  ``inputs`` must be tagged."""
    if not isinstance(inputs, Node) or all(inputs is not n for n in tape.tags.values()):
        raise ContractError("inputs were not tagged as differentiable on this tape")
    grads = tape.backward(loss)
    g = grads[inputs]
    return g.reshape(g.shape[0], -1)
