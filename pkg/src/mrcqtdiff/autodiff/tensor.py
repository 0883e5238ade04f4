"""Reverse-mode tape over dense numpy arrays."""

from __future__ import annotations

import contextlib
import os

import numpy as np

from ..errors import NumericalError, SizeError

_state = {"grad_enabled": True, "check_finite": bool(os.environ.get("MRCQT_DEBUG"))}


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording the tape (sampling, EMA evaluation)."""
    prev = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = prev


def set_check_finite(flag: bool):
    _state["check_finite"] = bool(flag)


class Tensor:
    """A real array plus the recorded rule for propagating its cotangent.

    ``backward_fn(g)`` returns one cotangent (or ``None``) per parent.
    """

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.parents = ()
        self.backward_fn = None
        self.name = name

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def gradient(self) -> np.ndarray:
        """Accumulated gradient; exactly zero for a leaf the loss does not depend on."""
        return np.zeros_like(self.data) if self.grad is None else self.grad

    def backward(self, grad=None):
        backward(self, grad)

    # operator sugar; the kernels live in ``ops``
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / np.asarray(other, dtype=self.dtype))

    def __neg__(self):
        return neg(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    return Tensor(arr)


def make_node(data, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    if _state["check_finite"] and not np.all(np.isfinite(out.data)):
        raise NumericalError(f"non-finite value produced by {backward_fn.__qualname__}")
    if _state["grad_enabled"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    return out


def _topological_order(root: Tensor) -> list[Tensor]:
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


def backward(root: Tensor, grad=None):
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
    if grad is None:
        if root.data.size != 1:
            raise SizeError("backward() without a cotangent needs a scalar output")
        grad = np.ones_like(root.data)
    if not root.requires_grad:
        return
    grads = {id(root): np.asarray(grad, dtype=root.dtype)}
    for node in reversed(_topological_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise SizeError(f"cotangent shape {pg.shape} != {parent.shape}")
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape

    def back(g):
        return unbroadcast(g, sa), unbroadcast(g, sb)

    return make_node(a.data + b.data, (a, b), back)


def neg(a) -> Tensor:
    return make_node(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    ad, bd = a.data, b.data

    def back(g):
        return (
            unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return make_node(ad * bd, (a, b), back)
