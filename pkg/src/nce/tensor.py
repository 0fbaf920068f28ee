"""Reverse-mode automatic differentiation over numpy arrays.

Every differentiable operation records a node on a global execution counter.
``Tensor.backward`` collects the nodes reachable from the output and replays
them in exact reverse execution order, so gradients that fan in from several
consumers are accumulated additively before they are propagated further.
"""
from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from nce.errors import NumericError, UsageError

_DTYPE = np.float32
_SEQ = itertools.count()
_GRAD_ENABLED = True


def default_dtype():
    return _DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the engine dtype (float64 is used by gradient checks)."""
    global _DTYPE
    previous, _DTYPE = _DTYPE, np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = previous


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    previous, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Node:
    """One recorded operation: its inputs and the closure mapping the output
    gradient to input gradients."""

    __slots__ = ("seq", "inputs", "backward", "name")

    def __init__(self, inputs, backward, name):
        self.seq = next(_SEQ)
        self.inputs = inputs
        self.backward = backward
        self.name = name


class Tensor:
    __array_priority__ = 100

    def __init__(self, values, requires_grad: bool = False, _node: Optional[Node] = None):
        arr = np.asarray(values)
        if arr.dtype != _DTYPE:
            arr = arr.astype(_DTYPE)
        self.values = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._node = _node

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    @property
    def size(self):
        return self.values.size

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        return float(self.values)

    def __len__(self):
        return len(self.values)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    def zero_grad(self):
        self.grad = None

    # -- graph construction -----------------------------------------------
    @staticmethod
    def from_op(values, inputs: Sequence["Tensor"], backward: Callable, name: str) -> "Tensor":
        """Wrap ``values`` as the output of an operation.

        ``backward(g)`` must return one gradient (or None) per input.
        """
        needs = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
        node = Node(tuple(inputs), backward, name) if needs else None
        return Tensor(values, requires_grad=needs, _node=node)

    def backward(self, grad: Optional[np.ndarray] = None):
        if not self.requires_grad:
            raise UsageError("backward() called on a tensor that does not require grad")
        if grad is None:
            if self.values.size != 1:
                raise UsageError("backward() without an explicit gradient needs a scalar output")
            grad = np.ones_like(self.values)
        nodes = _collect(self)
        grad = np.asarray(grad, dtype=self.values.dtype)
        if self._node is None:
            _accumulate(self, grad)
            return
        grads = {id(self): grad}
        for tensor in nodes:
            g = grads.pop(id(tensor), None)
            if g is None:
                continue
            node = tensor._node
            input_grads = node.backward(g)
            for inp, ig in zip(node.inputs, input_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if ig.shape != inp.shape:
                    ig = _unbroadcast(ig, inp.shape)
                if inp._node is None:
                    _accumulate(inp, ig)
                else:
                    key = id(inp)
                    grads[key] = grads[key] + ig if key in grads else ig

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _collect(root: Tensor):
    """Nodes reachable from ``root`` sorted by descending execution sequence."""
    seen = set()
    order = []
    stack = [root]
    while stack:
        t = stack.pop()
        if t._node is None or id(t) in seen:
            continue
        seen.add(id(t))
        order.append(t)
        stack.extend(t._node.inputs)
    order.sort(key=lambda t: t._node.seq, reverse=True)
    return order


def _accumulate(t: Tensor, g: np.ndarray):
    g = np.asarray(g, dtype=t.values.dtype)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def check_finite(t: Tensor, what: str = "tensor") -> Tensor:
    if not np.all(np.isfinite(t.values)):
        raise NumericError(f"non-finite values in {what}")
    return t


# -- elementwise and structural primitives ---------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor.from_op(a.values + b.values, (a, b), lambda g: (g, g), "add")


def neg(a: Tensor) -> Tensor:
    return Tensor.from_op(-a.values, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        scale = np.asarray(b, dtype=a.values.dtype)
        return Tensor.from_op(a.values * scale, (a,), lambda g: (g * scale,), "scale")
    a = as_tensor(a)
    av, bv = a.values, b.values
    return Tensor.from_op(av * bv, (a, b), lambda g: (g * bv, g * av), "mul")


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.values
    return Tensor.from_op(out, (a,), lambda g: (-g * out * out,), "reciprocal")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.values)
    return Tensor.from_op(out, (a,), lambda g: (g * out,), "exp")


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.values.sum(axis=axis, keepdims=keepdims)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor.from_op(out, (a,), backward, "sum")


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    original = a.shape
    return Tensor.from_op(a.values.reshape(shape), (a,), lambda g: (g.reshape(original),), "reshape")


def getitem(a: Tensor, index) -> Tensor:
    shape, dtype = a.shape, a.values.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g) if _fancy(index) else _add_slice(full, index, g)
        return (full,)

    return Tensor.from_op(a.values[index], (a,), backward, "getitem")


def _fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def _add_slice(full, index, g):
    full[index] += g


def stack(tensors: Iterable[Tensor]) -> Tensor:
    tensors = list(tensors)
    out = np.stack([t.values for t in tensors])
    return Tensor.from_op(out, tensors, lambda g: tuple(g[i] for i in range(len(tensors))), "stack")


def maximum0(a: Tensor) -> Tensor:
    """max(a, 0), the hinge used by cost penalties."""
    mask = a.values > 0
    return Tensor.from_op(a.values * mask, (a,), lambda g: (g * mask,), "hinge")


def softmax(a: Tensor) -> Tensor:
    """Softmax over a 1-D vector."""
    z = a.values - a.values.max()
    e = np.exp(z)
    p = e / e.sum()

    def backward(g):
        return (p * (g - np.dot(g, p)),)

    return Tensor.from_op(p, (a,), backward, "softmax")
