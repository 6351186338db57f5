"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

The graph is built on the fly (define-by-run). Every operation returns a new
:class:`Tensor` holding a closure that maps the output gradient to the
gradients of its parents. :meth:`Tensor.backward` walks the graph in reverse
topological order.

Shapes are strict: binary elementwise operations require identical shapes.
The only broadcast is the explicit :func:`add_bias` (row vector added to every
row of a matrix).
"""
from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "Tensor",
    "tensor",
    "matmul",
    "transpose",
    "add",
    "sub",
    "mul",
    "scale",
    "tanh",
    "sigmoid",
    "square",
    "add_bias",
    "elementwise",
    "reduce",
    "sum",
    "mean",
    "concat",
    "slice_cols",
    "slice_rows",
    "reshape",
    "no_grad",
]

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (evaluation passes)."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """Dense float64 array that can take part in a differentiation graph."""

    __slots__ = ("values", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.asarray(values, dtype=np.float64)
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], tuple]] = None
        self.op: Optional[str] = None

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.values.size == 1 else _not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.values

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def backward(self) -> None:
        """Populate ``grad`` on every ``requires_grad`` tensor reachable from this scalar.

        Gradients are accumulated: calling twice without zeroing doubles them.
        """
        if self.values.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.values)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            node.grad = g if node.grad is None else node.grad + g
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                prev = grads.get(key)
                grads[key] = pg if prev is None else prev + pg


def _not_scalar(t: Tensor):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


def _topological_order(root: Tensor) -> list:
    order: list = []
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
        for parent in node._parents:
            if id(parent) not in visited and parent.requires_grad:
                stack.append((parent, False))
    return order


def tensor(values, requires_grad: bool = False) -> Tensor:
    return Tensor(values, requires_grad=requires_grad)


def _make(values: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.values = values
    out.grad = None
    out.op = op
    out.requires_grad = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.values.shape != b.values.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of a ``(m, k)`` and a ``(k, n)`` tensor."""
    if a.values.ndim != 2 or b.values.ndim != 2 or a.values.shape[1] != b.values.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.values, b.values

    def backward(g):
        return (g @ bv.T if a.requires_grad else None, av.T @ g if b.requires_grad else None)

    return _make(av @ bv, (a, b), backward, "matmul")


def transpose(a: Tensor) -> Tensor:
    if a.values.ndim != 2:
        raise DimensionError(f"transpose: expected a matrix, got {a.shape}")
    return _make(a.values.T, (a,), lambda g: (g.T,), "transpose")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _make(a.values + b.values, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _make(a.values - b.values, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    av, bv = a.values, b.values
    return _make(av * bv, (a, b), lambda g: (g * bv, g * av), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a constant scalar."""
    c = float(c)
    return _make(a.values * c, (a,), lambda g: (g * c,), "scale")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.values)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    # tanh form stays finite for large |x|
    out = 0.5 * (1.0 + np.tanh(0.5 * a.values))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def square(a: Tensor) -> Tensor:
    x = a.values
    return _make(x * x, (a,), lambda g: (2.0 * x * g,), "square")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-``n`` bias to each row of an ``(m, n)`` matrix (or to an ``(n,)`` vector)."""
    if b.values.ndim != 1 or x.values.shape[-1] != b.values.shape[0]:
        raise DimensionError(f"add_bias: bias {b.shape} does not fit rows of {x.shape}")
    if x.values.ndim == 1:
        return _make(x.values + b.values, (x, b), lambda g: (g, g), "add_bias")
    if x.values.ndim != 2:
        raise DimensionError(f"add_bias: expected a vector or matrix, got {x.shape}")
    return _make(x.values + b.values, (x, b), lambda g: (g, g.sum(axis=0)), "add_bias")


_UNARY = {"tanh": tanh, "sigmoid": sigmoid, "square": square}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op: str, *operands: Tensor) -> Tensor:
    """Dispatch an elementwise operation by name."""
    if op in _UNARY:
        if len(operands) != 1:
            raise ValueError(f"{op} takes one operand, got {len(operands)}")
        return _UNARY[op](operands[0])
    if op in _BINARY:
        if len(operands) != 2:
            raise ValueError(f"{op} takes two operands, got {len(operands)}")
        return _BINARY[op](*operands)
    raise ValueError(f"unknown elementwise op {op!r}")


def sum(a: Tensor) -> Tensor:  # noqa: A001
    shape = a.values.shape
    return _make(np.array(a.values.sum()), (a,), lambda g: (np.full(shape, float(g)),), "sum")


def mean(a: Tensor) -> Tensor:
    shape, n = a.values.shape, a.values.size
    if n == 0:
        raise ValueError("mean of an empty tensor")
    return _make(np.array(a.values.mean()), (a,), lambda g: (np.full(shape, float(g) / n),), "mean")


def reduce(op: str, a: Tensor) -> Tensor:
    if op == "sum":
        return sum(a)
    if op == "mean":
        return mean(a)
    raise ValueError(f"unknown reduction {op!r}")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    ref = tensors[0].values
    ax = axis % ref.ndim
    for t in tensors[1:]:
        v = t.values
        if v.ndim != ref.ndim or any(
            v.shape[d] != ref.shape[d] for d in range(ref.ndim) if d != ax
        ):
            raise DimensionError(
                f"concat: shapes {[t.shape for t in tensors]} differ off axis {axis}"
            )
    bounds = np.cumsum([0] + [t.values.shape[ax] for t in tensors])

    def backward(g):
        idx = [slice(None)] * g.ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[ax] = slice(lo, hi)
            out.append(g[tuple(idx)])
        return tuple(out)

    return _make(np.concatenate([t.values for t in tensors], axis=ax), tensors, backward, "concat")


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    """Columns ``start:stop`` of a matrix (or elements of a vector)."""
    shape = a.values.shape

    def backward(g):
        full = np.zeros(shape)
        full[..., start:stop] = g
        return (full,)

    return _make(a.values[..., start:stop], (a,), backward, "slice_cols")


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    shape = a.values.shape

    def backward(g):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return _make(a.values[start:stop], (a,), backward, "slice_rows")


def reshape(a: Tensor, shape: tuple) -> Tensor:
    old = a.values.shape
    return _make(a.values.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")
