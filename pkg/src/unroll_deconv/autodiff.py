"""Reverse-mode differentiation over a closed set of grid operations.

A :class:`Tape` records every operation of one forward pass as a
:class:`Node`.  Node ids are tape positions, so inputs always precede the
nodes that consume them and :func:`backward` can sweep the tape in reverse.

Subgradients at kinks are fixed to zero: ReLU at an input of exactly 0 and
Abs at 0 both pass no gradient.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import grid as G
from . import metrics as M


class OpKind(enum.Enum):
    LEAF = "leaf"
    CONV_SAME = "conv_same"
    CORR_KERNEL_WINDOW = "corr_kernel_window"
    FLIP180 = "flip180"
    SAFE_DIV = "safe_div"
    HADAMARD = "hadamard"
    ADD = "add"
    SUB = "sub"
    RELU = "relu"
    SIGMOID = "sigmoid"
    ABS = "abs"
    SUM_ALL = "sum_all"
    MEAN_ALL = "mean_all"
    SCALAR_MUL = "scalar_mul"
    SSIM_LOSS = "ssim_loss"
    TV_PENALTY = "tv_penalty"


class TapeError(ValueError):
    pass


@dataclass
class Node:
    id: int
    op: OpKind
    inputs: tuple[int, ...]
    value: np.ndarray
    params: dict = field(default_factory=dict)
    trainable: bool = False
    adjoint: np.ndarray | None = None
    cache: object = None


def tv_penalty(x) -> float:
    """Anisotropic total variation with forward differences, no wraparound."""
    x = G.as_grid(x)
    return float(np.abs(np.diff(x, axis=0)).sum() + np.abs(np.diff(x, axis=1)).sum())


def _tv_grad(x):
    g = np.zeros_like(x)
    s = np.sign(np.diff(x, axis=0))
    g[1:, :] += s
    g[:-1, :] -= s
    s = np.sign(np.diff(x, axis=1))
    g[:, 1:] += s
    g[:, :-1] -= s
    return g


def _same_shape(vals, op):
    if vals[0].shape != vals[1].shape:
        raise TapeError(f"{op.value}: shape mismatch {vals[0].shape} vs {vals[1].shape}")


def _forward(op: OpKind, vals, params):
    """Return (value, cache) for one op."""
    if op is OpKind.CONV_SAME:
        return G.conv_same(vals[0], vals[1], params["mode"]), None
    if op is OpKind.CORR_KERNEL_WINDOW:
        return G.corr_kernel_window(vals[0], vals[1], params["kshape"], params["mode"]), None
    if op is OpKind.FLIP180:
        return G.flip180(vals[0]), None
    if op is OpKind.SAFE_DIV:
        _same_shape(vals, op)
        return G.safe_div(vals[0], vals[1], params["eps"]), None
    if op is OpKind.HADAMARD:
        _same_shape(vals, op)
        return vals[0] * vals[1], None
    if op is OpKind.ADD:
        _same_shape(vals, op)
        return vals[0] + vals[1], None
    if op is OpKind.SUB:
        _same_shape(vals, op)
        return vals[0] - vals[1], None
    if op is OpKind.RELU:
        return np.maximum(vals[0], 0.0), None
    if op is OpKind.SIGMOID:
        return G.sigmoid(vals[0]), None
    if op is OpKind.ABS:
        return np.abs(vals[0]), None
    if op is OpKind.SUM_ALL:
        return np.asarray(vals[0].sum()), None
    if op is OpKind.MEAN_ALL:
        return np.asarray(vals[0].mean()), None
    if op is OpKind.SCALAR_MUL:
        return params["c"] * vals[0], None
    if op is OpKind.SSIM_LOSS:
        _same_shape(vals, op)
        terms = M.ssim_terms(vals[0], vals[1], params["ssim"])
        return np.asarray(-terms["map"].mean()), terms
    if op is OpKind.TV_PENALTY:
        return np.asarray(tv_penalty(vals[0])), None
    raise TapeError(f"unknown op {op!r}")


def _backward(node: Node, vals, g):
    """Local gradient rule: adjoint contributions for each input."""
    op, p = node.op, node.params
    if op is OpKind.CONV_SAME:
        image, kernel = vals
        return (G.corr_same(g, kernel, p["mode"]),
                G.corr_kernel_window(g, image, kernel.shape, p["mode"]))
    if op is OpKind.CORR_KERNEL_WINDOW:
        ratio, image = vals
        return (G.conv_same(image, g, p["mode"]), G.corr_same(ratio, g, p["mode"]))
    if op is OpKind.FLIP180:
        return (g[::-1, ::-1],)
    if op is OpKind.SAFE_DIV:
        num, den = vals
        d = den + p["eps"]
        return (g / d, -g * num / (d * d))
    if op is OpKind.HADAMARD:
        return (g * vals[1], g * vals[0])
    if op is OpKind.ADD:
        return (g, g)
    if op is OpKind.SUB:
        return (g, -g)
    if op is OpKind.RELU:
        return (np.where(vals[0] > 0, g, 0.0),)
    if op is OpKind.SIGMOID:
        s = node.value
        return (g * s * (1.0 - s),)
    if op is OpKind.ABS:
        return (g * np.sign(vals[0]),)
    if op is OpKind.SUM_ALL:
        return (np.full_like(vals[0], g),)
    if op is OpKind.MEAN_ALL:
        return (np.full_like(vals[0], g / vals[0].size),)
    if op is OpKind.SCALAR_MUL:
        return (p["c"] * g,)
    if op is OpKind.SSIM_LOSS:
        return M.ssim_backward(vals[0], vals[1], node.cache, -float(g))
    if op is OpKind.TV_PENALTY:
        return (float(g) * _tv_grad(vals[0]),)
    raise TapeError(f"no gradient rule for {op!r}")


_ARITY = {
    OpKind.LEAF: 0,
    OpKind.CONV_SAME: 2,
    OpKind.CORR_KERNEL_WINDOW: 2,
    OpKind.FLIP180: 1,
    OpKind.SAFE_DIV: 2,
    OpKind.HADAMARD: 2,
    OpKind.ADD: 2,
    OpKind.SUB: 2,
    OpKind.RELU: 1,
    OpKind.SIGMOID: 1,
    OpKind.ABS: 1,
    OpKind.SUM_ALL: 1,
    OpKind.MEAN_ALL: 1,
    OpKind.SCALAR_MUL: 1,
    OpKind.SSIM_LOSS: 2,
    OpKind.TV_PENALTY: 1,
}


# Ops whose inputs must be 2D grids; the elementwise ones also take scalars.
_GRID_OPS = {
    OpKind.CONV_SAME, OpKind.CORR_KERNEL_WINDOW, OpKind.FLIP180, OpKind.SUM_ALL,
    OpKind.MEAN_ALL, OpKind.SSIM_LOSS, OpKind.TV_PENALTY,
}


class Tape:
    """Append-only record of one forward pass."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    @property
    def next_id(self) -> int:
        return len(self.nodes)

    def clear(self):
        self.nodes.clear()

    def value(self, node_id: int) -> np.ndarray:
        return self.nodes[node_id].value

    def leaf(self, value, trainable: bool = False) -> int:
        v = np.array(value, dtype=np.float64)
        if not np.isfinite(v).all():
            raise TapeError("leaf value contains non-finite entries")
        node = Node(self.next_id, OpKind.LEAF, (), v, trainable=trainable)
        self.nodes.append(node)
        return node.id

    def param(self, value) -> int:
        """Record a trainable leaf; :func:`grad_check` perturbs these in order."""
        return self.leaf(value, trainable=True)

    @property
    def trainable_ids(self) -> list[int]:
        return [n.id for n in self.nodes if n.trainable]

    def record(self, op: OpKind, inputs: Sequence[int], **params) -> int:
        if not isinstance(op, OpKind) or op is OpKind.LEAF:
            raise TapeError(f"unknown op {op!r}")
        inputs = tuple(int(i) for i in inputs)
        if len(inputs) != _ARITY[op]:
            raise TapeError(f"{op.value} takes {_ARITY[op]} inputs, got {len(inputs)}")
        for i in inputs:
            if not 0 <= i < self.next_id:
                raise TapeError(f"input node {i} does not exist on this tape")
        vals = [self.nodes[i].value for i in inputs]
        if op in _GRID_OPS and any(v.ndim != 2 for v in vals):
            raise TapeError(f"{op.value} expects grid inputs")
        try:
            value, cache = _forward(op, vals, params)
        except G.DimensionError as exc:
            raise TapeError(str(exc)) from exc
        node = Node(self.next_id, op, inputs, np.asarray(value, dtype=np.float64), params, cache=cache)
        self.nodes.append(node)
        return node.id

    # Shorthands used by the network builders.
    def conv_same(self, a, b, mode):
        return self.record(OpKind.CONV_SAME, (a, b), mode=G.BoundaryMode.parse(mode))

    def corr_kernel_window(self, ratio, image, kshape, mode):
        return self.record(OpKind.CORR_KERNEL_WINDOW, (ratio, image),
                           kshape=tuple(kshape), mode=G.BoundaryMode.parse(mode))

    def flip180(self, a):
        return self.record(OpKind.FLIP180, (a,))

    def safe_div(self, a, b, eps):
        return self.record(OpKind.SAFE_DIV, (a, b), eps=float(eps))

    def hadamard(self, a, b):
        return self.record(OpKind.HADAMARD, (a, b))

    def add(self, a, b):
        return self.record(OpKind.ADD, (a, b))

    def sub(self, a, b):
        return self.record(OpKind.SUB, (a, b))

    def relu(self, a):
        return self.record(OpKind.RELU, (a,))

    def sigmoid(self, a):
        return self.record(OpKind.SIGMOID, (a,))

    def abs(self, a):
        return self.record(OpKind.ABS, (a,))

    def sum_all(self, a):
        return self.record(OpKind.SUM_ALL, (a,))

    def mean_all(self, a):
        return self.record(OpKind.MEAN_ALL, (a,))

    def scalar_mul(self, c, a):
        return self.record(OpKind.SCALAR_MUL, (a,), c=float(c))

    def ssim_loss(self, a, b, params: M.SsimParams = M.DEFAULT_SSIM):
        return self.record(OpKind.SSIM_LOSS, (a, b), ssim=params)

    def tv_penalty(self, a):
        return self.record(OpKind.TV_PENALTY, (a,))


def backward(tape: Tape, loss_id: int) -> dict[int, np.ndarray]:
    """Propagate adjoints from the scalar ``loss_id`` back to every leaf.

    Returns a mapping from leaf id to its gradient.  Adjoints of nodes that
    do not influence the loss stay zero.
    """
    if not 0 <= loss_id < len(tape.nodes):
        raise TapeError(f"loss node {loss_id} does not exist on this tape")
    loss = tape.nodes[loss_id]
    if loss.value.ndim != 0:
        raise TapeError(f"loss must be scalar, node {loss_id} has shape {loss.value.shape}")
    for node in tape.nodes:
        node.adjoint = np.zeros_like(node.value)
    loss.adjoint = np.ones_like(loss.value)
    for node in reversed(tape.nodes[:loss_id + 1]):
        if node.op is OpKind.LEAF:
            continue
        if not node.adjoint.any():
            continue
        vals = [tape.nodes[i].value for i in node.inputs]
        contributions = _backward(node, vals, node.adjoint)
        for i, c in zip(node.inputs, contributions):
            tape.nodes[i].adjoint = tape.nodes[i].adjoint + c
    return {n.id: n.adjoint for n in tape.nodes if n.op is OpKind.LEAF}


def grad_check(builder: Callable[[list[np.ndarray]], tuple[Tape, int]],
               params: Sequence[np.ndarray], step: float = 1e-4) -> float:
    """Worst relative error between tape gradients and central differences.

    ``builder(params)`` must record ``params`` with :meth:`Tape.param`, in
    order, and return ``(tape, loss_id)``.  The relative error of an entry is
    ``|g_ad - g_fd| / max(1, |g_fd|)``.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    params = [np.array(p, dtype=np.float64) for p in params]

    def loss_at(ps):
        tape, loss_id = builder(ps)
        val = float(tape.value(loss_id))
        if not math.isfinite(val):
            raise FloatingPointError(f"non-finite loss {val} in grad_check")
        return val

    tape, loss_id = builder(params)
    ids = tape.trainable_ids
    if len(ids) != len(params):
        raise TapeError(f"builder recorded {len(ids)} trainable leaves for {len(params)} params")
    grads = backward(tape, loss_id)
    worst = 0.0
    for p_index, p in enumerate(params):
        g_ad = grads[ids[p_index]]
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + step
            up = loss_at(params)
            p[idx] = orig - step
            down = loss_at(params)
            p[idx] = orig
            g_fd = (up - down) / (2.0 * step)
            err = abs(g_ad[idx] - g_fd) / max(1.0, abs(g_fd))
            worst = max(worst, err)
    return worst
