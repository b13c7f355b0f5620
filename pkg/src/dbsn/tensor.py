"""Dense tensors with tape-based reverse-mode differentiation.

Every primitive computes its value with numpy and, when any input requires a
gradient, records a node holding its parents and a vector-Jacobian closure.
``backward`` orders the recorded nodes into a :class:`Tape` and sweeps it once
in reverse.

Shapes must match exactly. The only implicit broadcast is scalar against
tensor; anything else (bias rows, for instance) goes through an explicit
primitive such as :func:`repeat_rows`.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NonFiniteError",
    "NonDeterministicError",
    "no_grad",
    "grad_enabled",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "relu",
    "exp",
    "log",
    "softplus",
    "softmax",
    "log_softmax",
    "logsumexp",
    "tensor_sum",
    "mean",
    "concat",
    "dropout",
    "gather",
    "select",
    "repeat_rows",
    "standardize",
    "backward",
    "finite_difference_check",
]

DEFAULT_DTYPE = np.float64


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class NonDeterministicError(RuntimeError):
    pass


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable recording for the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("values", "requires_grad", "grad", "op", "_parents", "_vjp")

    def __init__(self, values, requires_grad: bool = False, dtype=None):
        if dtype is None:
            arr = np.asarray(values)
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
        self.values = np.array(values, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    @property
    def is_leaf(self) -> bool:
        return self._vjp is None

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.values)

    def numpy(self) -> np.ndarray:
        return self.values

    def detach(self) -> Tensor:
        return Tensor(self.values, dtype=self.values.dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}, op={self.op}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _result(values: np.ndarray, parents: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
    if not np.all(np.isfinite(values)):
        raise NonFiniteError(f"non-finite output from {op}")
    out = Tensor.__new__(Tensor)
    out.values = values
    out.grad = None
    out.op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(b, dtype=a.dtype)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(a, dtype=b.dtype)
    else:
        a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum())


# -- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.values + b.values, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.values - b.values, (a, b), vjp, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def vjp(g):
        return _unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)

    return _result(a.values * b.values, (a, b), vjp, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.values / b.values

    def vjp(g):
        return _unbroadcast(g / b.values, a.shape), _unbroadcast(-g * out / b.values, b.shape)

    return _result(out, (a, b), vjp, "div")


def neg(a: Tensor) -> Tensor:
    return _result(-a.values, (a,), lambda g: (-g,), "neg")


def relu(a: Tensor) -> Tensor:
    mask = a.values > 0
    return _result(np.where(mask, a.values, 0.0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.values)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.values)
    return _result(out, (a,), lambda g: (g / a.values,), "log")


def softplus(a: Tensor) -> Tensor:
    x = a.values
    out = np.logaddexp(0.0, x)
    sig = np.exp(x - out)
    return _result(out, (a,), lambda g: (g * sig,), "softplus")


# -- reductions and normalizers -----------------------------------------------


def _axis(a: Tensor, axis: int) -> int:
    if a.values.ndim == 0:
        raise ShapeError("cannot reduce a scalar along an axis")
    return axis % a.values.ndim


def logsumexp(a: Tensor, axis: int | None = None) -> Tensor:
    x = a.values
    if axis is None:
        m = x.max()
        s = np.exp(x - m)
        total = s.sum()
        out = np.asarray(m + np.log(total))
        w = s / total
        return _result(out, (a,), lambda g: (g * w,), "logsumexp")
    ax = _axis(a, axis)
    m = x.max(axis=ax, keepdims=True)
    s = np.exp(x - m)
    total = s.sum(axis=ax, keepdims=True)
    out = (m + np.log(total)).squeeze(ax)
    w = s / total
    return _result(out, (a,), lambda g: (np.expand_dims(g, ax) * w,), "logsumexp")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.values
    ax = _axis(a, axis)
    m = x.max(axis=ax, keepdims=True)
    shifted = x - m
    lse = np.log(np.exp(shifted).sum(axis=ax, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def vjp(g):
        return (g - p * g.sum(axis=ax, keepdims=True),)

    return _result(out, (a,), vjp, "log_softmax")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.values
    ax = _axis(a, axis)
    e = np.exp(x - x.max(axis=ax, keepdims=True))
    out = e / e.sum(axis=ax, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=ax, keepdims=True)),)

    return _result(out, (a,), vjp, "softmax")


def tensor_sum(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        shape = a.shape
        return _result(np.asarray(a.values.sum()), (a,), lambda g: (np.full(shape, g, dtype=a.dtype),), "sum")
    ax = _axis(a, axis)
    shape = a.shape

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),)

    return _result(a.values.sum(axis=ax), (a,), vjp, "sum")


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.values.size if axis is None else a.shape[_axis(a, axis)]
    return tensor_sum(a, axis) * (1.0 / n)


def standardize(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero-mean, unit-variance rows (no affine parameters)."""
    x = a.values
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    out = xc * inv

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gxm = (g * out).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - out * gxm),)

    return _result(out, (a,), vjp, "standardize")


# -- structural -------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} @ {b.shape}")

    def vjp(g):
        return g @ b.values.T, a.values.T @ g

    return _result(a.values @ b.values, (a, b), vjp, "matmul")


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat of nothing")
    ndim = parts[0].values.ndim
    ax = axis % ndim
    for p in parts[1:]:
        if p.values.ndim != ndim or any(
            p.shape[d] != parts[0].shape[d] for d in range(ndim) if d != ax
        ):
            raise ShapeError(f"concat shapes {[q.shape for q in parts]}")
    splits = np.cumsum([p.shape[ax] for p in parts])[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=ax))

    return _result(np.concatenate([p.values for p in parts], axis=ax), parts, vjp, "concat")


def dropout(a: Tensor, mask: np.ndarray, keep_prob: float) -> Tensor:
    """Apply a fixed 0/1 mask with inverted-dropout scaling."""
    mask = np.asarray(mask)
    if mask.shape != a.shape:
        raise ShapeError(f"dropout mask {mask.shape} vs {a.shape}")
    scale = (mask / keep_prob).astype(a.dtype)
    return _result(a.values * scale, (a,), lambda g: (g * scale,), "dropout")


def gather(a: Tensor, index: np.ndarray) -> Tensor:
    """Pick ``a[i, index[i]]`` for every row of a 2-D tensor."""
    index = np.asarray(index, dtype=np.int64)
    if a.values.ndim != 2 or index.shape != (a.shape[0],):
        raise ShapeError(f"gather {a.shape} with index {index.shape}")
    rows = np.arange(a.shape[0])

    def vjp(g):
        full = np.zeros_like(a.values)
        full[rows, index] = g
        return (full,)

    return _result(a.values[rows, index], (a,), vjp, "gather")


def select(a: Tensor, index) -> Tensor:
    """Integer indexing (``a[i]`` or ``a[i, j]``); yields a view-free copy."""
    if not isinstance(index, tuple):
        index = (index,)
    if not all(isinstance(i, (int, np.integer)) for i in index):
        raise TypeError("select takes integer indices only")

    def vjp(g):
        full = np.zeros_like(a.values)
        full[index] = g
        return (full,)

    return _result(np.array(a.values[index]), (a,), vjp, "select")


def repeat_rows(a: Tensor, n: int) -> Tensor:
    """[d] -> [n, d]; the explicit stand-in for bias broadcasting."""
    if a.values.ndim != 1:
        raise ShapeError("repeat_rows expects a vector")
    out = np.broadcast_to(a.values, (n, a.shape[0])).copy()
    return _result(out, (a,), lambda g: (g.sum(axis=0),), "repeat_rows")


# -- backward -----------------------------------------------------------------


@dataclass
class Tape:
    """Recorded operations in topological order (inputs before consumers)."""

    ops: list[Tensor]

    @classmethod
    def from_root(cls, root: Tensor) -> Tape:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.ops)


def backward(root: Tensor) -> Tape:
    """Populate ``grad`` on every leaf reachable from scalar ``root``.

    Leaf gradients accumulate across calls; callers reset them.
    """
    if root.shape != ():
        raise ShapeError(f"backward needs a scalar root, got {root.shape}")
    if not root.requires_grad:
        raise ValueError("root does not depend on any tensor requiring grad")
    tape = Tape.from_root(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones((), dtype=root.dtype)}
    for node in reversed(tape.ops):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.asarray(pg, dtype=parent.dtype)
    return tape


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
    coords: Iterable[tuple[int, ...]] | None = None,
) -> float:
    """Max relative error between the taped gradient and central differences.

    The error per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    ``x.grad`` is overwritten with the analytic gradient.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x.requires_grad = True
    x.grad = None
    out = f(x)
    backward(out)
    analytic = np.zeros_like(x.values) if x.grad is None else x.grad.copy()
    base = x.values.copy()
    with no_grad():
        again = f(x).values
    if not np.array_equal(np.asarray(out.values), np.asarray(again)):
        raise NonDeterministicError("f returned different values for the same input")
    if coords is None:
        coords = list(np.ndindex(*x.shape))
    worst = 0.0
    try:
        with no_grad():
            for c in coords:
                x.values[c] = base[c] + h
                up = float(f(x).values)
                x.values[c] = base[c] - h
                down = float(f(x).values)
                x.values[c] = base[c]
                numeric = (up - down) / (2.0 * h)
                a = float(analytic[c])
                worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    finally:
        x.values[...] = base
    return worst
