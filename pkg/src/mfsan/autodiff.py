"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is implicit: every tensor produced by an operation keeps references
to its inputs and a closure computing input gradients from the output
gradient.  ``backward`` on a scalar walks the ancestors once in reverse
topological order and accumulates gradients additively, so a tensor feeding
several consumers receives the sum of all path gradients.  Graphs are
rebuilt from scratch on every forward pass and become garbage once the loss
tensor goes out of scope.

Broadcasting follows trailing-dimension alignment (the numpy rule): shapes
are compared from the last axis backwards and a size-1 axis stretches to
match.  Scalars broadcast against anything.

Subgradient conventions at kinks: ``abs`` uses 0 at 0, ``relu`` uses
derivative 0 at 0.  Finite-difference checks should nudge inputs away from
these points.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, MathDomainError, ShapeError

_node_ids = itertools.count()


def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    """Result shape of broadcasting ``a`` against ``b``, or ShapeError."""
    out = []
    for da, db in itertools.zip_longest(reversed(a), reversed(b), fillvalue=1):
        if da == db or da == 1 or db == 1:
            out.append(max(da, db))
        else:
            raise ShapeError(f"shapes {a} and {b} are not broadcastable")
    return tuple(reversed(out))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing broadcast expansion."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A contiguous float64 array, optionally part of a differentiation graph.

    ``requires_grad`` marks tensors whose gradient should be materialized in
    ``.grad`` by ``backward``.  Results of operations on graph members are
    graph members themselves.
    """

    __slots__ = ("values", "requires_grad", "grad", "node_id", "_parents", "_backward_fn")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.ascontiguousarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node_id = next(_node_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def all_finite(self) -> bool:
        """Explicit non-finite check; NaN/Inf are never rejected silently."""
        return bool(np.isfinite(self.values).all())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- graph plumbing --------------------------------------------------

    @property
    def in_graph(self) -> bool:
        return self.requires_grad or self._backward_fn is not None

    def detach(self) -> "Tensor":
        """A graph-free copy of the values."""
        return Tensor(self.values.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every graph leaf.

        ``self`` must hold exactly one element.  Gradients add across calls;
        clear with ``zero_grad`` between uses.
        """
        if self.values.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.in_graph:
            return

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen and parent.in_graph:
                    stack.append((parent, False))

        flowing: dict[int, np.ndarray] = {id(self): np.ones_like(self.values)}
        for node in reversed(topo):
            grad = flowing.pop(id(node), None)
            if grad is None:
                continue
            if node.requires_grad:
                node.grad = grad.copy() if node.grad is None else node.grad + grad
            if node._backward_fn is None:
                continue
            for parent, pgrad in zip(node._parents, node._backward_fn(grad)):
                if pgrad is None or not parent.in_graph:
                    continue
                key = id(parent)
                flowing[key] = pgrad if key not in flowing else flowing[key] + pgrad

    # -- operations ------------------------------------------------------

    def _lift(self, other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(np.asarray(other, dtype=np.float64))

    def __add__(self, other) -> "Tensor":
        other = self._lift(other)
        _broadcast_shape(self.shape, other.shape)
        a, b = self, other

        def backward(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return _result(a.values + b.values, (a, b), backward)

    def __radd__(self, other) -> "Tensor":
        return self.__add__(other)

    def __sub__(self, other) -> "Tensor":
        other = self._lift(other)
        _broadcast_shape(self.shape, other.shape)
        a, b = self, other

        def backward(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

        return _result(a.values - b.values, (a, b), backward)

    def __rsub__(self, other) -> "Tensor":
        return self._lift(other).__sub__(self)

    def __neg__(self) -> "Tensor":
        return self.mul_scalar(-1.0)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, (int, float)):
            return self.mul_scalar(float(other))
        other = self._lift(other)
        _broadcast_shape(self.shape, other.shape)
        a, b = self, other

        def backward(g):
            ga = _unbroadcast(g * b.values, a.shape) if a.in_graph else None
            gb = _unbroadcast(g * a.values, b.shape) if b.in_graph else None
            return ga, gb

        return _result(a.values * b.values, (a, b), backward)

    def __rmul__(self, other) -> "Tensor":
        return self.__mul__(other)

    def mul_scalar(self, c: float) -> "Tensor":
        a, c = self, float(c)

        def backward(g):
            return (g * c,)

        return _result(a.values * c, (a,), backward)

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    def exp(self) -> "Tensor":
        a = self
        out = np.exp(a.values)

        def backward(g):
            return (g * out,)

        return _result(out, (a,), backward)

    def log(self) -> "Tensor":
        a = self
        if a.values.size and a.values.min() <= 0.0:
            raise MathDomainError(f"log requires strictly positive input, min value {a.values.min()!r}")

        def backward(g):
            return (g / a.values,)

        return _result(np.log(a.values), (a,), backward)

    def abs(self) -> "Tensor":
        a = self

        def backward(g):
            return (g * np.sign(a.values),)

        return _result(np.abs(a.values), (a,), backward)

    def relu(self) -> "Tensor":
        a = self

        def backward(g):
            return (g * (a.values > 0.0),)

        return _result(np.maximum(a.values, 0.0), (a,), backward)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self

        def backward(g):
            return (_spread_reduction_grad(g, a.shape, axis, keepdims),)

        return _result(np.sum(a.values, axis=axis, keepdims=keepdims), (a,), backward)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self
        if axis is not None and not isinstance(axis, int):
            raise ContractError("mean supports a single integer axis or None")
        count = a.values.size if axis is None else a.values.shape[axis]

        def backward(g):
            return (_spread_reduction_grad(g, a.shape, axis, keepdims) / count,)

        return _result(np.mean(a.values, axis=axis, keepdims=keepdims), (a,), backward)

    def reshape(self, shape) -> "Tensor":
        a = self
        shape = tuple(shape)

        def backward(g):
            return (g.reshape(a.shape),)

        return _result(a.values.reshape(shape), (a,), backward)

    def transpose(self) -> "Tensor":
        a = self
        if a.ndim != 2:
            raise ShapeError(f"transpose expects a 2-d tensor, got shape {a.shape}")

        def backward(g):
            return (np.ascontiguousarray(g.T),)

        return _result(a.values.T, (a,), backward)

    @property
    def T(self) -> "Tensor":
        return self.transpose()


def _result(values: np.ndarray, parents: tuple, backward_fn) -> Tensor:
    out = Tensor(values)
    if any(p.in_graph for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    return out


def _spread_reduction_grad(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    """Expand a sum/mean output gradient back to the input shape."""
    if axis is None:
        return np.full(shape, np.asarray(g).reshape(-1)[0])
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape).copy()


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-d tensors, with gradients for both inputs."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got shapes {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} vs {b.shape}")

    def backward(g):
        ga = g @ b.values.T if a.in_graph else None
        gb = a.values.T @ g if b.in_graph else None
        return ga, gb

    return _result(a.values @ b.values, (a, b), backward)


def softmax(logits: Tensor) -> Tensor:
    """Row-wise softmax of an n-by-K logit matrix, K >= 2.

    Stabilized by row-max subtraction, so rows like [1000, 0] do not
    overflow.  Each output row sums to 1 up to rounding.
    """
    if logits.ndim != 2:
        raise ShapeError(f"softmax expects a 2-d tensor, got shape {logits.shape}")
    if logits.shape[1] < 2:
        raise ShapeError(f"softmax needs at least 2 classes, got {logits.shape[1]}")
    a = logits
    shifted = a.values - a.values.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        inner = (g * s).sum(axis=1, keepdims=True)
        return (s * (g - inner),)

    return _result(s, (a,), backward)


@dataclass
class GradCheckReport:
    """Outcome of an analytic-vs-central-difference gradient comparison."""

    per_parameter: dict = field(default_factory=dict)
    max_rel_err: float = 0.0
    tolerance: float = 1e-4
    failures: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures


def check_gradients(f, params, step: float = 1e-5, tolerance: float = 1e-4,
                    denom_floor: float = 1e-6) -> GradCheckReport:
    """Compare analytic gradients of ``f()`` against central differences.

    ``f`` must be a deterministic zero-argument callable returning a scalar
    Tensor built from the current values of ``params``, a sequence of
    (name, Tensor) pairs.  Relative error per element is
    |analytic - numeric| / max(|analytic|, |numeric|, denom_floor); the
    report records the max per parameter and lists parameters over
    ``tolerance``.
    """
    report = GradCheckReport(tolerance=tolerance)

    for _, p in params:
        p.zero_grad()
    loss = f()
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise ContractError("check_gradients needs f() to return a scalar Tensor")
    loss.backward()
    analytic = {name: (np.zeros_like(p.values) if p.grad is None else p.grad.copy())
                for name, p in params}

    for name, p in params:
        numeric = np.zeros_like(p.values)
        flat = p.values.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + step
            f_plus = f().item()
            flat[i] = saved - step
            f_minus = f().item()
            flat[i] = saved
            num_flat[i] = (f_plus - f_minus) / (2.0 * step)
        a = analytic[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), denom_floor)
        rel = np.abs(a - numeric) / denom
        worst = float(rel.max()) if rel.size else 0.0
        report.per_parameter[name] = worst
        report.max_rel_err = max(report.max_rel_err, worst)
        if worst >= tolerance:
            report.failures.append(name)

    for _, p in params:
        p.zero_grad()
    return report
