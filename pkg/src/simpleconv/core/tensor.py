"""Dense tensor with a per-forward reverse-mode gradient graph."""

from __future__ import annotations

from typing import Callable, Iterable, Optional

import numpy as np


class Tensor:
    """An n-d float array that can take part in a gradient graph.

    ``data`` is a contiguous numpy array (float32 for training, float64 for
    gradient checks). ``grad`` is allocated lazily with the same shape.
    The graph edges (``_parents`` / ``_backward``) are dropped once
    :meth:`backward` has walked them, so every forward pass builds a fresh
    graph.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple = (),
        _backward: Optional[Callable[[np.ndarray], None]] = None,
    ):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = np.ascontiguousarray(arr)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def accumulate(self, g: np.ndarray):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    # a few scalar helpers, enough to combine losses
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("only scalar multiplication is supported")
        return scale(self, float(other))

    __rmul__ = __mul__

    def backward(self, grad: Optional[np.ndarray] = None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological(self)
        if self.requires_grad:
            self.accumulate(grad)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if node._backward is not None and g is not None:
                node._backward(g, grads)
            node._parents = ()
            node._backward = None


def _topological(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def needs_grad(*tensors: Tensor) -> bool:
    return any(t.requires_grad or t._backward is not None for t in tensors)


def make_node(data: np.ndarray, parents: Iterable[Tensor], local_backward) -> Tensor:
    """Wrap an op result.

    ``local_backward(g)`` returns one gradient (or None) per parent. The
    engine routes leaf gradients into ``.grad`` and interior gradients into
    the pending map consumed by :meth:`Tensor.backward`.
    """
    parents = tuple(parents)
    if not needs_grad(*parents):
        return Tensor(data)

    def _backward(g, pending):
        for parent, pg in zip(parents, local_backward(g)):
            if pg is None:
                continue
            if parent.requires_grad:
                parent.accumulate(pg)
            if parent._backward is not None:
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg

    return Tensor(data, requires_grad=False, _parents=parents, _backward=_backward)


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return make_node(a.data + b.data, (a, b), lambda g: (g, g))


def scale(a: Tensor, k: float) -> Tensor:
    return make_node(a.data * a.dtype.type(k), (a,), lambda g: (g * k,))
