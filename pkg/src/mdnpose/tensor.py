"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation on tensors that require gradients appends a node to an
implicit graph.  Nodes carry a monotonically increasing sequence number, so
sorting the ancestors of a loss by that number recovers the forward
execution order; ``backward`` walks it in reverse, visiting each node once.

Broadcasting is deliberately narrow: operands must have equal shapes, or
one of them must be a scalar.  Layers that need per-row or per-column
broadcasting (bias add, batch norm) are written as fused ops with their own
local gradient rules via :meth:`Tensor.from_op`.
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, DomainError, EmptyInputError, NumericError, ProbeError

_sequence = itertools.count()
_grad_enabled = True

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[BackwardFn] = None
        self._seq = next(_sequence)

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: BackwardFn) -> "Tensor":
        """Wrap the result of a custom op.

        ``backward`` receives the upstream gradient and returns one gradient
        (or ``None``) per parent, each shaped like that parent.
        """
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=np.float64)
        out.grad = None
        out.name = None
        out._seq = next(_sequence)
        out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- basic properties -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- autodiff ---------------------------------------------------------

    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() without a seed gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=np.float64)
            if grad.shape != self.shape:
                raise DimensionError(f"seed gradient shape {grad.shape} does not match {self.shape}")
        graph = Graph.build(self)
        pending = {id(self): grad}
        for node in reversed(graph.nodes):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def relu(self):
        return relu(self)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)

    def max(self, axis=None):
        return reduce_max(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


@contextlib.contextmanager
def no_grad():
    """Suspend graph recording, e.g. for inference over a frozen network."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


@dataclass
class Graph:
    """Operations reachable from a root, in forward execution order."""

    nodes: list = field(default_factory=list)

    @classmethod
    def build(cls, root: Tensor) -> "Graph":
        seen = set()
        nodes = []
        stack = [root]
        while stack:
            t = stack.pop()
            if id(t) in seen or not t.requires_grad:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t._parents)
        nodes.sort(key=lambda t: t._seq)
        return cls(nodes)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _is_scalar(t: Tensor) -> bool:
    return t.data.ndim == 0 or t.data.size == 1 and t.data.ndim <= 1


def _check_binary(a: Tensor, b: Tensor, opname: str) -> None:
    if a.shape == b.shape or _is_scalar(a) or _is_scalar(b):
        return
    raise DimensionError(f"{opname}: shapes {a.shape} and {b.shape} are not equal and neither is a scalar")


def _fit(g: np.ndarray, t: Tensor) -> np.ndarray:
    """Reduce a gradient back onto a (possibly scalar) operand."""
    if g.shape == t.shape:
        return g
    return np.full(t.shape, g.sum())


# -- elementwise ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b, "add")
    return Tensor.from_op(a.data + b.data, (a, b), lambda g: (_fit(g, a), _fit(g, b)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b, "sub")
    return Tensor.from_op(a.data - b.data, (a, b), lambda g: (_fit(g, a), _fit(-g, b)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b, "mul")
    return Tensor.from_op(
        a.data * b.data, (a, b), lambda g: (_fit(g * b.data, a), _fit(g * a.data, b))
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b, "div")
    out = a.data / b.data
    return Tensor.from_op(
        out, (a, b), lambda g: (_fit(g / b.data, a), _fit(-g * out / b.data, b))
    )


def neg(a: Tensor) -> Tensor:
    return Tensor.from_op(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor.from_op(a.data * c, (a,), lambda g: (g * c,))


def square(a: Tensor) -> Tensor:
    return Tensor.from_op(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    bad = np.argwhere(~(a.data > 0))
    if bad.size:
        idx = tuple(int(i) for i in bad[0])
        raise DomainError(f"log of non-positive value {a.data[idx]!r} at index {idx}", index=idx)
    return Tensor.from_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0  # derivative at exactly 0 is 0
    return Tensor.from_op(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; the gradient is zero wherever clamping was active."""
    inside = (a.data >= lo) & (a.data <= hi)
    return Tensor.from_op(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


# -- linear algebra ------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return Tensor.from_op(
        a.data @ b.data, (a, b),
        lambda g: (g @ b.data.T if a.requires_grad else None, a.data.T @ g if b.requires_grad else None),
    )


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight + bias`` with the bias broadcast over rows."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise DimensionError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data + bias.data
    return Tensor.from_op(
        out, (x, weight, bias),
        lambda g: (g @ weight.data.T if x.requires_grad else None, x.data.T @ g, g.sum(axis=0)),
    )


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {old} as {shape}") from exc
    return Tensor.from_op(out, (a,), lambda g: (g.reshape(old),))


# -- reductions ----------------------------------------------------------------


def _check_reduce(a: Tensor, axis) -> None:
    if a.size == 0:
        raise EmptyInputError("reduction over an empty tensor")
    if axis is not None and not (0 <= axis < a.ndim):
        raise DimensionError(f"axis {axis} out of range for rank {a.ndim}")


def reduce_sum(a: Tensor, axis: Optional[int] = None) -> Tensor:
    _check_reduce(a, axis)
    shape = a.shape
    if axis is None:
        return Tensor.from_op(a.data.sum(), (a,), lambda g: (np.full(shape, g),))
    return Tensor.from_op(
        a.data.sum(axis=axis),
        (a,),
        lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),),
    )


def reduce_mean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    _check_reduce(a, axis)
    n = a.size if axis is None else a.shape[axis]
    return scale(reduce_sum(a, axis), 1.0 / n)


def reduce_max(a: Tensor, axis: Optional[int] = None) -> Tensor:
    """Maximum; the gradient goes to the first maximal element only."""
    _check_reduce(a, axis)
    shape = a.shape
    if axis is None:
        flat = int(np.argmax(a.data))

        def back(g):
            out = np.zeros(a.size)
            out[flat] = g
            return (out.reshape(shape),)

        return Tensor.from_op(a.data.reshape(-1)[flat], (a,), back)

    idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)

    def back_axis(g):
        out = np.zeros(shape)
        np.put_along_axis(out, idx, np.expand_dims(g, axis), axis=axis)
        return (out,)

    return Tensor.from_op(np.take_along_axis(a.data, idx, axis=axis).squeeze(axis), (a,), back_axis)


# -- row-wise normalizers ------------------------------------------------------


def _check_rows(t: Tensor, opname: str) -> None:
    if t.ndim != 2:
        raise DimensionError(f"{opname}: expected a matrix, got shape {t.shape}")
    if t.shape[1] < 1:
        raise EmptyInputError(f"{opname}: rows are empty")
    if np.isnan(t.data).any():
        row = int(np.argwhere(np.isnan(t.data))[0][0])
        raise NumericError(f"{opname}: NaN in row {row}", index=row)


def log_sum_exp_rows(t: Tensor) -> Tensor:
    """``log(sum(exp(row)))`` per row, shifted by the row max."""
    _check_rows(t, "log_sum_exp_rows")
    m = t.data.max(axis=1, keepdims=True)
    shifted = np.exp(t.data - m)
    total = shifted.sum(axis=1, keepdims=True)
    out = (m + np.log(total))[:, 0]
    weights = shifted / total
    return Tensor.from_op(out, (t,), lambda g: (g[:, None] * weights,))


def softmax_rows(t: Tensor) -> Tensor:
    _check_rows(t, "softmax_rows")
    e = np.exp(t.data - t.data.max(axis=1, keepdims=True))
    s = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return Tensor.from_op(s, (t,), back)


# -- gradient checking ---------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: list
    max_abs_error: list
    tol: float

    @property
    def passed(self) -> bool:
        return all(e < self.tol for e in self.max_rel_error)

    @property
    def worst(self) -> float:
        return max(self.max_rel_error, default=0.0)


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
    tol: float = 1e-5,
    max_probes: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    floor: float = 1e-8,
) -> GradCheckReport:
    """Compare autodiff gradients of a scalar function with central differences.

    ``f`` is called with ``inputs`` and must return a scalar tensor.  The
    relative error per element is ``|a - n| / max(|a|, |n|, floor)``; the
    report keeps the maximum per input.  ``max_probes`` limits how many
    randomly chosen elements of each input are probed.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ConfigError(f"eps must lie in [1e-7, 1e-4], got {eps}")
    rng = rng if rng is not None else np.random.default_rng(0)
    for t in inputs:
        t.grad = None
    out = f(*inputs)
    if out.size != 1:
        raise DimensionError(f"grad_check needs a scalar function, got shape {out.shape}")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    def probe() -> float:
        value = f(*inputs).item()
        if not np.isfinite(value):
            raise ProbeError("function is not finite at a probe point")
        return value

    rel, absolute = [], []
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_probes is not None and flat.size > max_probes:
            idx = rng.choice(flat.size, size=max_probes, replace=False)
        worst_rel = worst_abs = 0.0
        a_flat = a.reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            up = probe()
            flat[i] = orig - eps
            down = probe()
            flat[i] = orig
            num = (up - down) / (2.0 * eps)
            err = abs(a_flat[i] - num)
            denom = max(abs(a_flat[i]), abs(num), floor)
            worst_rel = max(worst_rel, err / denom if err > 0 else 0.0)
            worst_abs = max(worst_abs, err)
        rel.append(worst_rel)
        absolute.append(worst_abs)
    return GradCheckReport(rel, absolute, tol)
