"""Tape-based reverse-mode differentiation.

A ``Tape`` records every op in creation order, which is already a
topological order, so the backward pass is a single reverse sweep that
visits each node exactly once. Node values are cached in float64 while
the tape is alive; leaves enter as float32 matrices and gradients are
handed back as float64 arrays for the optimizer to round.

The op set is fixed: matmul, add, hadamard, scale, transpose,
row_softmax, gelu, layer_norm, mse_loss, concat_rows, slice_rows,
broadcast_cols, plus the fused similarity penalties cosine_similarity
and column_dot_l1. Anything else must be composed from these.
"""

from __future__ import annotations

import math

import numpy as np

from ..errors import ContractError, ShapeError

_GELU_K = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715
_LN_EPS = 1e-5
_COS_EPS = 1e-8


class Node:
    __slots__ = ("tape", "value", "grad", "parents", "backward_fn", "trainable", "needs_grad")

    def __init__(self, tape, value, parents, backward_fn, trainable=False):
        self.tape = tape
        self.value = value  # float64 ndarray
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.trainable = trainable
        if parents:
            self.needs_grad = any(p.needs_grad for p in parents)
        else:
            self.needs_grad = trainable

    @property
    def shape(self):
        return self.value.shape


class Tape:
    """Single-threaded op recorder; one training run owns one tape per step."""

    def __init__(self):
        self.nodes: list[Node] = []

    def leaf(self, value, trainable: bool = False) -> Node:
        arr = np.asarray(value, dtype=np.float64)
        if arr.ndim != 2:
            raise ShapeError(f"leaf must be 2-D, got ndim={arr.ndim}")
        node = Node(self, arr, (), None, trainable=trainable)
        self.nodes.append(node)
        return node

    def _record(self, value, parents, backward_fn) -> Node:
        node = Node(self, np.asarray(value, dtype=np.float64), parents, backward_fn)
        self.nodes.append(node)
        return node


def _same_tape(*nodes: Node) -> Tape:
    tape = nodes[0].tape
    for n in nodes[1:]:
        if n.tape is not tape:
            raise ContractError("ops cannot mix nodes from different tapes")
    return tape


def _accumulate(node: Node, grad: np.ndarray):
    if not node.needs_grad:
        return
    if node.grad is None:
        node.grad = grad.copy()
    else:
        node.grad += grad


def matmul(a: Node, b: Node) -> Node:
    tape = _same_tape(a, b)
    if a.value.shape[1] != b.value.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.value.shape} x {b.value.shape}")
    out = a.value @ b.value

    def backward(g):
        _accumulate(a, g @ b.value.T)
        _accumulate(b, a.value.T @ g)

    return tape._record(out, (a, b), backward)


def add(a: Node, b: Node) -> Node:
    tape = _same_tape(a, b)
    if a.value.shape != b.value.shape:
        raise ShapeError(f"add: shapes differ, {a.value.shape} vs {b.value.shape}")

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return tape._record(a.value + b.value, (a, b), backward)


def hadamard(a: Node, b: Node) -> Node:
    tape = _same_tape(a, b)
    if a.value.shape != b.value.shape:
        raise ShapeError(f"hadamard: shapes differ, {a.value.shape} vs {b.value.shape}")

    def backward(g):
        _accumulate(a, g * b.value)
        _accumulate(b, g * a.value)

    return tape._record(a.value * b.value, (a, b), backward)


def scale(a: Node, c: float) -> Node:
    c = float(c)

    def backward(g):
        _accumulate(a, g * c)

    return a.tape._record(a.value * c, (a,), backward)


def transpose(a: Node) -> Node:
    def backward(g):
        _accumulate(a, g.T)

    return a.tape._record(a.value.T, (a,), backward)


def row_softmax(a: Node) -> Node:
    shifted = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        # Jacobian-vector form: y * (g - <g, y> per row).
        dot = (g * y).sum(axis=1, keepdims=True)
        _accumulate(a, y * (g - dot))

    return a.tape._record(y, (a,), backward)


def gelu(a: Node) -> Node:
    x = a.value
    inner = _GELU_K * (x + _GELU_C * x**3)
    t = np.tanh(inner)
    y = 0.5 * x * (1.0 + t)

    def backward(g):
        sech2 = 1.0 - t * t
        d = 0.5 * (1.0 + t) + 0.5 * x * sech2 * _GELU_K * (1.0 + 3.0 * _GELU_C * x * x)
        _accumulate(a, g * d)

    return a.tape._record(y, (a,), backward)


def layer_norm(a: Node) -> Node:
    """Per-row normalization to zero mean, unit variance (biased)."""
    x = a.value
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    y = xc * inv

    def backward(g):
        gm = g.mean(axis=1, keepdims=True)
        gy = (g * y).mean(axis=1, keepdims=True)
        _accumulate(a, inv * (g - gm - y * gy))

    return a.tape._record(y, (a,), backward)


def mse_loss(a: Node, b: Node) -> Node:
    tape = _same_tape(a, b)
    if a.value.shape != b.value.shape:
        raise ShapeError(f"mse_loss: shapes differ, {a.value.shape} vs {b.value.shape}")
    diff = a.value - b.value
    n = diff.size
    out = np.array([[np.mean(diff * diff)]])

    def backward(g):
        coeff = 2.0 * g[0, 0] / n
        _accumulate(a, coeff * diff)
        _accumulate(b, -coeff * diff)

    return tape._record(out, (a, b), backward)


def concat_rows(parts: list[Node]) -> Node:
    if not parts:
        raise ShapeError("concat_rows needs at least one node")
    tape = _same_tape(*parts)
    cols = parts[0].value.shape[1]
    for p in parts:
        if p.value.shape[1] != cols:
            raise ShapeError("concat_rows: column counts differ")
    out = np.concatenate([p.value for p in parts], axis=0)
    splits = np.cumsum([p.value.shape[0] for p in parts])[:-1]

    def backward(g):
        for p, chunk in zip(parts, np.split(g, splits, axis=0)):
            _accumulate(p, chunk)

    return tape._record(out, tuple(parts), backward)


def slice_rows(a: Node, start: int, stop: int) -> Node:
    rows = a.value.shape[0]
    if not (0 <= start < stop <= rows):
        raise ShapeError(f"slice_rows: [{start}:{stop}] out of range for {rows} rows")

    def backward(g):
        if a.needs_grad:
            full = np.zeros_like(a.value)
            full[start:stop] = g
            _accumulate(a, full)

    return a.tape._record(a.value[start:stop], (a,), backward)


def broadcast_cols(v: Node, rows: int) -> Node:
    """Tile a 1 x n row down to rows x n; gradient sums back over rows."""
    if v.value.shape[0] != 1:
        raise ShapeError(f"broadcast_cols expects a 1 x n row, got {v.value.shape}")
    out = np.repeat(v.value, rows, axis=0)

    def backward(g):
        _accumulate(v, g.sum(axis=0, keepdims=True))

    return v.tape._record(out, (v,), backward)


def cosine_similarity(u: Node, v: Node) -> Node:
    """|<u, v>| / (|u| |v| + eps) for two 1 x n rows, as a 1 x 1 node."""
    tape = _same_tape(u, v)
    if u.value.shape != v.value.shape or u.value.shape[0] != 1:
        raise ShapeError("cosine_similarity expects two equal 1 x n rows")
    uu = u.value[0]
    vv = v.value[0]
    s = float(uu @ vv)
    nu = float(np.sqrt(uu @ uu))
    nv = float(np.sqrt(vv @ vv))
    denom = nu * nv + _COS_EPS
    c = abs(s) / denom

    def backward(g):
        g00 = g[0, 0]
        sgn = np.sign(s)
        if u.needs_grad:
            du = sgn * vv / denom
            if nu > 0.0:
                du = du - abs(s) * nv * (uu / nu) / denom**2
            _accumulate(u, (g00 * du).reshape(1, -1))
        if v.needs_grad:
            dv = sgn * uu / denom
            if nv > 0.0:
                dv = dv - abs(s) * nu * (vv / nv) / denom**2
            _accumulate(v, (g00 * dv).reshape(1, -1))

    return tape._record(np.array([[c]]), (u, v), backward)


def column_dot_l1(a: Node, b: Node) -> Node:
    """sum_j |<a[:, j], b[:, j]>| as a 1 x 1 node."""
    tape = _same_tape(a, b)
    if a.value.shape != b.value.shape:
        raise ShapeError("column_dot_l1: shapes differ")
    dots = (a.value * b.value).sum(axis=0)
    out = np.array([[np.abs(dots).sum()]])

    def backward(g):
        sgn = np.sign(dots) * g[0, 0]
        _accumulate(a, b.value * sgn)
        _accumulate(b, a.value * sgn)

    return tape._record(out, (a, b), backward)


def backward(tape: Tape, loss: Node) -> dict[Node, np.ndarray]:
    """Backpropagate from a scalar loss.

    Returns {leaf: dLoss/dLeaf} for every trainable leaf on the tape
    (zeros when the leaf does not reach the loss). Non-trainable leaves
    are skipped.
    """
    if loss.tape is not tape:
        raise ContractError("loss node does not belong to this tape")
    if loss.value.shape != (1, 1):
        raise ContractError(f"loss must be 1 x 1, got {loss.value.shape}")
    loss.grad = np.ones((1, 1))
    for node in reversed(tape.nodes):
        if node.grad is None or node.backward_fn is None:
            continue
        node.backward_fn(node.grad)
    grads: dict[Node, np.ndarray] = {}
    for node in tape.nodes:
        if node.trainable and node.backward_fn is None:
            grads[node] = node.grad if node.grad is not None else np.zeros_like(node.value)
    return grads
