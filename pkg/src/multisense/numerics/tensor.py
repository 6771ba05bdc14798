"""Dense-array autodiff substrate.

A Tensor wraps a numpy array plus an optional tape node. Ops (see ops.py)
record a reverse-mode graph whenever any input requires grad and grad
recording is enabled. Everything runs in float32 by default; float64 is
supported for verification (finite differences need the headroom).
"""

from __future__ import annotations

import contextlib

import numpy as np

DEFAULT_DTYPE = np.float32

_GRAD_ENABLED = True
_NODE_COUNTER = 0


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an op."""

    def __init__(self, op, detail):
        super().__init__(f"{op}: {detail}")
        self.op = op


class GraphError(RuntimeError):
    """Raised on invalid use of the autodiff graph."""


def is_grad_enabled():
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the context (used for rollouts)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """Array value, optionally tracked by the reverse-mode tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_node_id", "op_name")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjp = None
        self._node_id = 0
        self.op_name = "leaf"

    @property
    def shape(self):
        return list(self.data.shape)

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={tuple(self.data.shape)}, dtype={self.data.dtype}, op={self.op_name})"

    def backward(self):
        backward(self)


def make_node(data, parents, vjp, op_name):
    """Wrap an op result; records the tape edge when tracking is active."""
    global _NODE_COUNTER
    out = Tensor(data)
    tracked = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = tracked
    out.op_name = op_name
    if tracked:
        _NODE_COUNTER += 1
        out._node_id = _NODE_COUNTER
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _topo_order(root):
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss):
    """Backpropagate from a scalar loss; returns {leaf Tensor: gradient array}.

    Also stores gradients on every requires_grad leaf's .grad (accumulating
    across calls until zero_grad).
    """
    if loss.data.size != 1:
        raise GraphError(f"backward requires a scalar loss, got shape {tuple(loss.data.shape)}")
    if not loss.requires_grad:
        raise GraphError("loss does not require grad (no graph was recorded)")

    grads = {id(loss): np.ones_like(loss.data)}
    leaf_map = {}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            # leaf
            if node.grad is None:
                node.grad = g.copy()
            else:
                node.grad = node.grad + g
            leaf_map[node] = node.grad
            continue
        parent_grads = node._vjp(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.data.shape:
                raise GraphError(
                    f"internal: vjp of {node.op_name} produced shape {pg.shape} for parent shape {p.data.shape}"
                )
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return leaf_map


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=dtype)


def parameter(data, dtype=None):
    """Leaf tensor with requires_grad=True (model weights)."""
    return Tensor(np.asarray(data, dtype=dtype if dtype is not None else DEFAULT_DTYPE), requires_grad=True)
