"""Define-by-run reverse-mode differentiation over numpy arrays.

Every differentiable operation is a registered primitive with a forward
kernel ``fwd(*values, **attrs) -> (out, ctx)`` and a backward kernel
``bwd(ctx, grad_out, needs) -> tuple of input grads`` (``None`` where the
input does not need a gradient).
"""

from __future__ import annotations

import contextlib
import enum
from typing import Callable, Sequence

import numpy as np

from voxshape.errors import NumericError, ShapeError

CHECK_FINITE = True
_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Run forward passes without recording the graph."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class PrimitiveKind(enum.Enum):
    CONV3D = "conv3d"
    CONV3D_STRIDE2 = "conv3d_stride2"
    TRANSPOSED_CONV3D = "transposed_conv3d"
    DENSE = "dense"
    INSTANCE_NORM = "instance_norm"
    LEAKY_RELU = "leaky_relu"
    SIGMOID = "sigmoid"
    ADD = "add"
    MUL_SCALAR = "mul_scalar"
    ELEMENTWISE_MUL = "elementwise_mul"
    REDUCE_SUM = "reduce_sum"
    GLOBAL_AVG_POOL = "global_avg_pool"
    RESHAPE = "reshape"
    CONCAT = "concat"
    # helpers needed by the loss and the transformer chain
    ADD_SCALAR = "add_scalar"
    DIV = "div"
    TAKE = "take"
    CENTER = "center"
    # registered by voxshape.geometry
    AFFINE_MATRIX = "affine_matrix"
    AFFINE_GRID = "affine_grid"
    TRILINEAR_SAMPLE = "trilinear_sample"


_REGISTRY: dict[PrimitiveKind, tuple[Callable, Callable]] = {}


def register(kind: PrimitiveKind, fwd: Callable, bwd: Callable) -> None:
    _REGISTRY[kind] = (fwd, bwd)


def registered_kinds() -> list[PrimitiveKind]:
    return [k for k in PrimitiveKind if k in _REGISTRY]


class Node:
    """A value in the computation graph."""

    __slots__ = ("value", "grad", "kind", "parents", "ctx", "requires_grad", "name")

    def __init__(self, value, requires_grad=False, name=None):
        self.value = np.asarray(value)
        self.grad = None
        self.kind = None
        self.parents: tuple[Node, ...] = ()
        self.ctx = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        op = self.kind.value if self.kind else "leaf"
        return f"Node(shape={self.shape}, op={op}, requires_grad={self.requires_grad})"


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def forward(kind: PrimitiveKind, inputs: Sequence, **attrs) -> Node:
    """Apply primitive ``kind`` to ``inputs`` and record it on the graph."""
    try:
        fwd, _ = _REGISTRY[kind]
    except KeyError:
        raise ShapeError(kind.value, "primitive is not registered") from None
    nodes = tuple(as_node(x) for x in inputs)
    out, ctx = fwd(*(n.value for n in nodes), **attrs)
    if CHECK_FINITE and not np.all(np.isfinite(out)):
        raise NumericError(f"{kind.value}: non-finite value in forward output")
    node = Node(out)
    if _GRAD_ENABLED and any(n.requires_grad for n in nodes):
        node.requires_grad = True
        node.kind = kind
        node.parents = nodes
        node.ctx = ctx
    return node


def _topo_order(root: Node) -> list[Node]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Node) -> None:
    """Accumulate d(root)/d(node) into ``.grad`` of every upstream node.

    Calling it twice without clearing grads adds the contributions.
    """
    if root.value.size != 1:
        raise ShapeError("backward", f"root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return
    order = _topo_order(root)
    # gradients flowing within this call; leaves accumulate into .grad
    pending: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node.kind is None:
            continue
        _, bwd = _REGISTRY[node.kind]
        needs = tuple(p.requires_grad for p in node.parents)
        grads = bwd(node.ctx, g, needs)
        for p, pg in zip(node.parents, grads):
            if pg is None or not p.requires_grad:
                continue
            if CHECK_FINITE and not np.all(np.isfinite(pg)):
                raise NumericError(f"{node.kind.value}: non-finite gradient in backward")
            key = id(p)
            pending[key] = pg if key not in pending else pending[key] + pg
