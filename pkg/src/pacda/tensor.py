"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op on a tensor that requires gradients records its parents and a
backward closure; :meth:`Tensor.backward` walks the recorded graph in reverse
creation order. Broadcasting is limited to what the networks here need:
equal shapes, scalars, and trailing-suffix broadcasting (a ``(F,)`` operand
against a ``(B, F)`` operand).
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ContractError, DomainError, NonFiniteError, ShapeError

_state = threading.local()
_counter = itertools.count()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced a non-finite value")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_order", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._order = next(_counter)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis: int | None = None) -> Tensor:
        return sum_(self, axis)

    def mean(self, axis: int | None = None) -> Tensor:
        return mean(self, axis)

    def backward(self) -> None:
        """Populate ``grad`` of every graph tensor with d(self)/d(tensor).

        Gradients accumulate across calls until reset with ``zero_grad``.
        """
        if self.data.size != 1 or self.data.ndim > 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("loss does not depend on any tensor that requires grad")

        nodes: dict[int, Tensor] = {}
        stack = [self]
        while stack:
            node = stack.pop()
            if id(node) in nodes:
                continue
            nodes[id(node)] = node
            stack.extend(p for p in node._parents if p.requires_grad)
        # creation order is a valid topological order of the graph
        order = sorted(nodes.values(), key=lambda t: t._order, reverse=True)

        pending: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in order:
            g = pending.pop(id(node), None)
            if g is None:
                continue
            node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._order = next(_counter)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _broadcast_shape(a: tuple[int, ...], b: tuple[int, ...], op: str) -> tuple[int, ...]:
    if a == b:
        return a
    if len(b) <= len(a) and a[len(a) - len(b):] == b:
        return a
    if len(a) < len(b) and b[len(b) - len(a):] == a:
        return b
    raise ShapeError(f"{op}: incompatible shapes {a} and {b}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    return grad


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "div")
    if np.any(b.data == 0):
        raise DomainError("division by zero")
    ad, bd = a.data, b.data
    out = ad / bd
    return _result(out, (a, b),
                   lambda g: (_unbroadcast(g / bd, ad.shape),
                              _unbroadcast(-g * out / bd, bd.shape)), "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    if exponent < 0 and np.any(a.data == 0):
        raise DomainError("negative power of zero")
    if not float(exponent).is_integer() and np.any(a.data < 0):
        raise DomainError("fractional power of a negative value")
    ad = a.data
    return _result(ad ** exponent, (a,),
                   lambda g: (g * exponent * ad ** (exponent - 1),), "power")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        if ad.ndim == 2 and bd.ndim == 2:
            return g @ bd.T, ad.T @ g
        if ad.ndim == 2:  # matrix @ vector
            return np.outer(g, bd), ad.T @ g
        if bd.ndim == 2:  # vector @ matrix
            return bd @ g, np.outer(ad, g)
        return g * bd, g * ad

    return _result(ad @ bd, (a, b), backward, "matmul")


def relu(a) -> Tensor:
    a = as_tensor(a)
    on = a.data > 0
    return _result(np.where(on, a.data, 0.0), (a,), lambda g: (np.where(on, g, 0.0),), "relu")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log of a nonpositive value")
    ad = a.data
    return _result(np.log(ad), (a,), lambda g: (g / ad,), "log")


def maximum(a, floor: float) -> Tensor:
    """Elementwise ``max(a, floor)``; the gradient is zero where clamped."""
    a = as_tensor(a)
    keep = a.data >= floor
    return _result(np.where(keep, a.data, floor), (a,), lambda g: (np.where(keep, g, 0.0),), "maximum")


def apply_mask(a, mask: np.ndarray) -> Tensor:
    """Entries where ``mask`` is false become exact zeros; their gradient is zero."""
    a = as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise ShapeError(f"mask shape {mask.shape} does not match tensor shape {a.shape}")
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (np.where(mask, g, 0.0),), "apply_mask")


def _check_axis(a: Tensor, axis: int | None, op: str) -> None:
    if axis is not None and not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"{op}: axis {axis} out of range for shape {a.shape}")


def sum_(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    _check_axis(a, axis, "sum")
    shape = a.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _result(np.asarray(a.data.sum(axis=axis)), (a,), backward, "sum")


def mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    _check_axis(a, axis, "mean")
    n = a.data.size if axis is None else a.shape[axis]
    if n == 0:
        raise ShapeError("mean over an empty axis")
    return sum_(a, axis) / float(n)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    _check_axis(a, axis, "softmax")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), backward, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    _check_axis(a, axis, "log_softmax")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _result(out, (a,), backward, "log_softmax")
