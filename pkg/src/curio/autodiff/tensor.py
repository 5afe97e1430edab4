"""Tensors with dynamically recorded reverse-mode derivative graphs.

Every op produces a fresh Tensor whose ``op`` field records the inputs
and a closure that maps the output adjoint onto the input adjoints.
``backward`` walks the recorded graph once in reverse topological order.
Leaf gradients accumulate across calls; intermediate adjoints are
transient and reset at the start of every backward pass.
"""

from __future__ import annotations

import numpy as np

from ..errors import NumericError, UsageError

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class OpNode:
    """Record of one executed op: its kind, inputs and backward closure."""

    __slots__ = ("kind", "inputs", "backward_fn")

    def __init__(self, kind, inputs, backward_fn):
        self.kind = kind
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn

    def __repr__(self):
        return f"OpNode(kind={self.kind!r}, n_inputs={len(self.inputs)})"


class Tensor:
    """N-d float array paired with a same-shaped gradient buffer.

    Leaf tensors (``op is None``) are the only ones whose gradients
    survive across backward passes; parameters are leaves with
    ``requires_grad=True``.
    """

    __slots__ = ("data", "grad", "requires_grad", "op")

    def __init__(self, data, dtype=None, requires_grad=False):
        arr = np.asarray(data, dtype=dtype, order="C")
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad = np.zeros_like(self.data)
        self.requires_grad = bool(requires_grad)
        self.op: OpNode | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad[...] = 0

    def __repr__(self):
        tag = self.op.kind if self.op is not None else "leaf"
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, from={tag})"


def from_op(kind: str, inputs, data: np.ndarray, backward_fn) -> Tensor:
    """Wrap an op result, recording provenance and checking finiteness."""
    if not np.isfinite(data).all():
        raise NumericError(f"op '{kind}' produced non-finite values")
    out = Tensor(data)
    out.requires_grad = any(t.requires_grad for t in inputs)
    out.op = OpNode(kind, inputs, backward_fn)
    return out


def _topo_order(root: Tensor) -> list[Tensor]:
    """Leaves-first topological order below ``root``; rejects cycles."""
    OPEN, DONE = 0, 1
    state: dict[int, int] = {}
    order: list[Tensor] = []
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            state[id(node)] = DONE
            order.append(node)
            continue
        st = state.get(id(node))
        if st == DONE:
            continue
        if st == OPEN:
            # A node re-entered while its subtree is still being explored
            # can only be reached through itself (inputs are deduplicated).
            raise UsageError("autodiff graph contains a cycle")
        state[id(node)] = OPEN
        stack.append((node, True))
        if node.op is not None:
            for parent in dict.fromkeys(node.op.inputs):
                if state.get(id(parent)) != DONE:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's grad buffer.

    Calling backward twice without zeroing doubles leaf gradients.
    Intermediate tensors are used as adjoint workspaces and are reset on
    every call, so they do not accumulate.
    """
    if loss.data.size != 1:
        raise UsageError(
            f"backward requires a scalar loss, got shape {loss.data.shape}"
        )
    if loss.op is None:
        loss.grad += 1
        return
    order = _topo_order(loss)
    for t in order:
        if t.op is not None:
            t.grad[...] = 0
    loss.grad[...] = 1
    for t in reversed(order):
        if t.op is not None and t.requires_grad:
            t.op.backward_fn(t.grad)
