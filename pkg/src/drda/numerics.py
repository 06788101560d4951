"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every operation returns a new :class:`Tensor` recording its parents and a
closure that maps the output cotangent to parent cotangents.  Shapes are
explicit: the only broadcast supported is adding a 1-D bias to the rows of
a 2-D tensor, and multiplying/dividing by a Python scalar.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, NumericError

__all__ = [
    "Tensor",
    "as_tensor",
    "parameter",
    "constant",
    "evaluate_with_gradients",
    "finite_difference_check",
    "matmul",
    "relu",
    "exp",
    "log",
    "sqrt",
    "norm",
    "softmax",
    "log_softmax",
    "reshape",
    "detach",
]


class Tensor:
    __slots__ = ("data", "requires_grad", "op", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, op: str = "leaf"):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0 and op == "leaf":
            arr = arr.reshape(())
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite value produced by op '{op}'")
        self.data = arr
        self.requires_grad = requires_grad
        self.op = op
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = self.name or self.op
        return f"Tensor({tag}, shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        if _is_scalar(other):
            return add(mul(self, -1.0), other)
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis: int | None = None):
        return tsum(self, axis)

    def mean(self, axis: int | None = None):
        return tmean(self, axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def constant(data) -> Tensor:
    return Tensor(data)


def detach(x: Tensor) -> Tensor:
    return Tensor(x.data)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    out = Tensor(data, op=op)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    if _is_scalar(b):
        a = as_tensor(a)
        s = float(b)
        return _make(a.data + s, (a,), lambda g: (g,), "add_scalar")
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")
    if a.ndim == 2 and b.ndim == 1 and b.shape[0] == a.shape[1]:
        return _make(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0)), "bias_add")
    raise ContractError(f"add: incompatible shapes {a.shape} and {b.shape}")


def sub(a, b) -> Tensor:
    if _is_scalar(b):
        return add(a, -float(b))
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ContractError(f"sub: incompatible shapes {a.shape} and {b.shape}")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    if _is_scalar(b):
        a = as_tensor(a)
        s = float(b)
        return _make(a.data * s, (a,), lambda g: (g * s,), "scale")
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ContractError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a, b) -> Tensor:
    if _is_scalar(b):
        if float(b) == 0.0:
            raise NumericError("div: division by zero scalar")
        return mul(a, 1.0 / float(b))
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ContractError(f"div: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b), lambda g: (g / bd, -g * out / bd), "div")


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0.0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def exp(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0.0):
        raise NumericError("log: non-positive input")
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,), "log")


def sqrt(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data < 0.0):
        raise NumericError("sqrt: negative input")
    out = np.sqrt(x.data)

    def backward(g):
        safe = np.where(out > 0.0, out, 1.0)
        return (np.where(out > 0.0, 0.5 * g / safe, 0.0),)

    return _make(out, (x,), backward, "sqrt")


# ---------------------------------------------------------------- reductions


def tsum(x: Tensor, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    if axis is None:
        return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),), "sum")
    out = x.data.sum(axis=axis)
    return _make(out, (x,), lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),), "sum_axis")


def tmean(x: Tensor, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else x.shape[axis]
    if count == 0:
        raise ContractError("mean of an empty tensor")
    return mul(tsum(x, axis), 1.0 / count)


def norm(x: Tensor, axis: int | None = None) -> Tensor:
    """Euclidean norm (over all entries, or per row with ``axis=1``).

    The subgradient at the zero vector is taken to be zero.
    """
    x = as_tensor(x)
    xd = x.data
    if axis is None:
        out = np.asarray(np.sqrt(np.sum(xd * xd)))

        def backward(g):
            n = float(out)
            return (np.zeros_like(xd) if n == 0.0 else g * xd / n,)

        return _make(out, (x,), backward, "norm")
    out = np.sqrt(np.sum(xd * xd, axis=axis))

    def backward_axis(g):
        n = np.expand_dims(out, axis)
        safe = np.where(n > 0.0, n, 1.0)
        return (np.where(n > 0.0, np.expand_dims(g, axis) * xd / safe, 0.0),)

    return _make(out, (x,), backward_axis, "norm_axis")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ContractError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def transpose(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2:
        raise ContractError("transpose expects a 2-D tensor")
    return _make(x.data.T.copy(), (x,), lambda g: (g.T,), "transpose")


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def take(x: Tensor, index) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(x.data[index]), (x,), backward, "take")


def softmax(x: Tensor) -> Tensor:
    """Row-wise softmax of a 2-D tensor."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise ContractError("softmax expects a 2-D tensor")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=1, keepdims=True)),)

    return _make(out, (x,), backward, "softmax")


def log_softmax(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2:
        raise ContractError("log_softmax expects a 2-D tensor")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)

    def backward(g):
        return (g - sm * g.sum(axis=1, keepdims=True),)

    return _make(out, (x,), backward, "log_softmax")


# ---------------------------------------------------------------- backward


def _topological(output: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
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
    return order


def evaluate_with_gradients(output: Tensor, leaves: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Back-propagate from a scalar ``output``.

    Returns a mapping from each trainable leaf (or each of ``leaves`` when
    given) to d output / d leaf.  Leaves that do not influence the output get
    an exact zero array.
    """
    if not isinstance(output, Tensor) or output.data.size != 1:
        raise ContractError("evaluate_with_gradients needs a scalar output")
    grads: dict[int, np.ndarray] = {}
    found: dict[int, Tensor] = {}
    if output.requires_grad:
        grads[id(output)] = np.ones_like(output.data)
        for node in reversed(_topological(output)):
            g = grads.pop(id(node), None) if not node.is_leaf else grads.get(id(node))
            if node.is_leaf:
                found[id(node)] = node
                continue
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if not np.all(np.isfinite(pg)):
                    raise NumericError(f"non-finite gradient in backward of op '{node.op}'")
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = np.asarray(pg, dtype=np.float64).reshape(parent.shape)
    if leaves is None:
        return {leaf: grads[id(leaf)] for leaf in found.values()}
    return {leaf: grads.get(id(leaf), np.zeros_like(leaf.data)) for leaf in leaves}


def finite_difference_check(build: Callable[[], Tensor], leaf: Tensor, step: float = 1e-5,
                            floor: float = 1e-12) -> float:
    """Max relative error between the analytic gradient and central differences.

    ``build`` must rebuild the scalar graph from the current ``leaf.data``;
    the leaf value is swapped (never mutated) for each probe.  ``floor`` bounds
    the denominator from below, so entries whose true gradient is zero (dead
    units, unused leaves) are judged on absolute error instead of on round-off.
    """
    if not step > 0.0:
        raise ContractError("finite_difference_check: step must be positive")
    analytic = evaluate_with_gradients(build(), [leaf])[leaf]
    base = leaf.data
    numeric = np.empty_like(base)
    try:
        for idx in np.ndindex(base.shape):
            plus = base.copy()
            plus[idx] += step
            leaf.data = plus
            f_plus = build().item()
            minus = base.copy()
            minus[idx] -= step
            leaf.data = minus
            f_minus = build().item()
            numeric[idx] = (f_plus - f_minus) / (2.0 * step)
    finally:
        leaf.data = base
    rel = np.abs(analytic - numeric) / np.maximum(np.abs(analytic) + np.abs(numeric), floor)
    return float(rel.max()) if rel.size else 0.0
