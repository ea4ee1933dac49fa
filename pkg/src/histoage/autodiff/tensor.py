"""
Tensor values and the recording tape.

Every differentiable op produces a new Tensor; when gradients are enabled and
any input requires them, the op attaches a TapeNode (op tag, input tensors,
saved values, backward closure). backward() walks the nodes reachable from a
scalar loss in reverse topological order, visiting each node once.
"""
import itertools
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from histoage.utils.errors import NumericFailure, ShapeError

DEFAULT_DTYPE = np.float32
CHECK_FINITE = True

_grad_enabled = True
_node_ids = itertools.count()


@contextmanager
def no_grad():
    """Run ops without recording them (evaluation, the stop-gradient branch)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


@dataclass(eq=False)
class TapeNode:
    op: str
    inputs: tuple
    backward_fn: Callable
    saved: dict = field(default_factory=dict)
    node_id: int = field(default_factory=lambda: next(_node_ids))


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "_node")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        array = np.asarray(data, dtype=dtype if dtype is not None else None)
        if dtype is None and not np.issubdtype(array.dtype, np.floating):
            array = array.astype(DEFAULT_DTYPE)
        self.data = array
        self.requires_grad = requires_grad
        self.name = name
        self._node = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """Trainable tensor; always requires gradients."""

    __slots__ = ()

    def __init__(self, data, name: str, dtype=None):
        super().__init__(data, requires_grad=True, name=name, dtype=dtype)


def record(op: str, out_data: np.ndarray, inputs: tuple, backward_fn: Callable, **saved) -> Tensor:
    """Wrap an op result, attaching a tape node when gradients flow through it."""
    if CHECK_FINITE and not np.all(np.isfinite(out_data)):
        raise NumericFailure(f"{op} produced non-finite values")
    needs_grad = _grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs_grad)
    if needs_grad:
        out._node = TapeNode(op=op, inputs=tuple(inputs), backward_fn=backward_fn, saved=saved)
    return out


def stop_gradient(x: Tensor) -> Tensor:
    """Same values, no history: nothing upstream of x receives gradient through it."""
    return Tensor(x.data, requires_grad=False)


# ---------------------- Reverse pass ----------------------

def _topological_order(loss: Tensor) -> list:
    order = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        tensor, expanded = stack.pop()
        node = tensor._node
        if node is None:
            continue
        if expanded:
            order.append(tensor)
            continue
        if node.node_id in visited:
            continue
        visited.add(node.node_id)
        stack.append((tensor, True))
        for parent in node.inputs:
            if parent._node is not None and parent._node.node_id not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, params) -> dict:
    """
    Gradients of a scalar loss with respect to params (a name -> Tensor mapping
    or a list of named tensors). Parameters the loss does not reach, including
    those only reachable through stop_gradient, get exact zeros.
    """
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ShapeError("backward", loss.shape, ())
    if isinstance(params, dict):
        named = dict(params)
    else:
        named = {p.name: p for p in params}

    grads = {id(loss): np.ones_like(loss.data)}
    for tensor in reversed(_topological_order(loss)):
        upstream = grads.pop(id(tensor), None)
        if upstream is None:
            continue
        node = tensor._node
        input_grads = node.backward_fn(upstream)
        for parent, g in zip(node.inputs, input_grads):
            if g is None or not parent.requires_grad:
                continue
            if g.shape != parent.shape:
                raise ShapeError(f"{node.op}.backward", g.shape, parent.shape)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g

    result = {}
    for name, param in named.items():
        g = grads.get(id(param))
        result[name] = np.zeros_like(param.data) if g is None else g.astype(param.data.dtype, copy=False)
    return result
