"""Reverse-mode automatic differentiation over dense float64 arrays.

Each operation returns a new :class:`Tensor` that remembers its inputs and
one vector-Jacobian closure per input; :func:`backward` walks those records
in reverse topological order. Numpy supplies the array arithmetic, every
differentiation rule lives here. Elementwise ops broadcast numpy-style over
leading axes; no other implicit shape magic.
"""
from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .errors import (
    IndexOutOfRangeError,
    LabelOutOfRangeError,
    NonScalarLossError,
    ShapeMismatchError,
)

Array = np.ndarray

_GELU_K = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


class Tensor:
    """Dense float64 array with an optional accumulated gradient.

    ``requires_grad`` marks leaves whose gradient is wanted; tensors
    computed from at least one such leaf carry the operation record that
    lets :func:`backward` reach it. ``grad`` accumulates additively across
    :func:`backward` calls until :meth:`zero_grad`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjps")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjps: tuple[Callable[[Array], Array], ...] = ()

    @property
    def tracked(self) -> bool:
        """True when backward() has work to do at or below this tensor."""
        return self.requires_grad or bool(self._parents)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: Array, parents: Sequence[Tensor], vjps: Sequence[Callable]) -> Tensor:
    out = Tensor(data)
    if any(p.tracked for p in parents):
        out._parents = tuple(parents)
        out._vjps = tuple(vjps)
    return out


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum ``grad`` over the axes that broadcasting added or stretched."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    squeeze = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if squeeze:
        grad = grad.sum(axis=squeeze, keepdims=True)
    return grad.reshape(shape)


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)
    return _result(
        a.data + b.data,
        (a, b),
        (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a, b)
    return _result(
        a.data - b.data,
        (a, b),
        (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a, b)
    return _result(
        a.data * b.data,
        (a, b),
        (
            lambda g: _unbroadcast(g * b.data, a.shape),
            lambda g: _unbroadcast(g * a.data, b.shape),
        ),
    )


def scale(a, factor: float) -> Tensor:
    a = as_tensor(a)
    factor = float(factor)
    return _result(a.data * factor, (a,), (lambda g: g * factor,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeMismatchError(f"matmul: operands must be at least 2-D, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError(f"matmul: inner dimensions disagree, {a.shape} @ {b.shape}")
    try:
        data = a.data @ b.data
    except ValueError:
        raise ShapeMismatchError(f"matmul: leading axes do not broadcast, {a.shape} @ {b.shape}") from None
    return _result(
        data,
        (a, b),
        (
            lambda g: _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape),
            lambda g: _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape),
        ),
    )


def transpose_last_two(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim < 2:
        raise ShapeMismatchError(f"transpose_last_two: need at least 2-D, got {a.shape}")
    return _result(np.swapaxes(a.data, -1, -2), (a,), (lambda g: np.swapaxes(g, -1, -2),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if math.prod(shape) != a.size:
        raise ShapeMismatchError(f"reshape: cannot view {a.shape} as {shape}")
    old = a.shape
    return _result(a.data.reshape(shape), (a,), (lambda g: g.reshape(old),))


def concat_rows(*tensors) -> Tensor:
    """Concatenate along the row axis (second-to-last)."""
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeMismatchError("concat_rows: no operands")
    ndim = ts[0].data.ndim
    if ndim < 2 or any(t.data.ndim != ndim for t in ts):
        raise ShapeMismatchError(
            "concat_rows: operands must share an at-least-2-D shape, got "
            + ", ".join(str(t.shape) for t in ts)
        )
    base = list(ts[0].shape)
    for t in ts[1:]:
        other = list(t.shape)
        if other[:-2] != base[:-2] or other[-1] != base[-1]:
            raise ShapeMismatchError(
                "concat_rows: shapes differ off the row axis: "
                + ", ".join(str(x.shape) for x in ts)
            )
    data = np.concatenate([t.data for t in ts], axis=-2)
    offsets = np.cumsum([0] + [t.shape[-2] for t in ts])

    def make_vjp(k: int):
        lo, hi = offsets[k], offsets[k + 1]
        return lambda g: g[..., lo:hi, :]

    return _result(data, ts, tuple(make_vjp(k) for k in range(len(ts))))


def slice_rows(a, start: int, stop: int) -> Tensor:
    """Take rows [start, stop) along the second-to-last axis."""
    a = as_tensor(a)
    if a.data.ndim < 2:
        raise ShapeMismatchError(f"slice_rows: need at least 2-D, got {a.shape}")
    rows = a.shape[-2]
    if not 0 <= start < stop <= rows:
        raise IndexOutOfRangeError(f"slice_rows: [{start}, {stop}) outside 0..{rows}")

    def vjp(g: Array) -> Array:
        full = np.zeros(a.shape)
        full[..., start:stop, :] = g
        return full

    return _result(a.data[..., start:stop, :], (a,), (vjp,))


# ---------------------------------------------------------------------------
# nonlinearities and reductions


def gelu(a) -> Tensor:
    """Gaussian error linear unit (tanh approximation)."""
    a = as_tensor(a)
    x = a.data
    x_sq = x * x
    t = np.tanh(_GELU_K * (x + _GELU_C * x_sq * x))

    def vjp(g: Array) -> Array:
        dinner = _GELU_K * (1.0 + 3.0 * _GELU_C * x_sq)
        return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)

    return _result(0.5 * x * (1.0 + t), (a,), (vjp,))


def softmax_last_axis(a) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def vjp(g: Array) -> Array:
        return s * (g - (g * s).sum(axis=-1, keepdims=True))

    return _result(s, (a,), (vjp,))


def layer_norm_last_axis(a, eps: float = 1e-5) -> Tensor:
    """Zero-mean unit-variance normalization of the last axis (no affine)."""
    a = as_tensor(a)
    x = a.data
    centered = x - x.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    y = centered * inv

    def vjp(g: Array) -> Array:
        return inv * (
            g - g.mean(axis=-1, keepdims=True) - y * (g * y).mean(axis=-1, keepdims=True)
        )

    return _result(y, (a,), (vjp,))


def mean(a) -> Tensor:
    a = as_tensor(a)
    size = a.size
    shape = a.shape
    return _result(
        np.asarray(a.data.mean()), (a,), (lambda g: np.full(shape, float(g) / size),)
    )


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return _result(np.asarray(a.data.sum()), (a,), (lambda g: np.full(shape, float(g)),))


def cross_entropy_logits(logits, labels) -> Tensor:
    """Mean cross-entropy of integer labels against rows of logits.

    Accepts a single (classes,) row or a (batch, classes) matrix; uses the
    log-sum-exp form so large logits stay finite.
    """
    a = as_tensor(logits)
    if a.data.ndim not in (1, 2):
        raise ShapeMismatchError(f"cross_entropy_logits: logits must be 1-D or 2-D, got {a.shape}")
    z = a.data if a.data.ndim == 2 else a.data[None, :]
    lab = np.asarray(labels, dtype=np.int64).reshape(-1)
    if lab.shape[0] != z.shape[0]:
        raise ShapeMismatchError(
            f"cross_entropy_logits: {z.shape[0]} rows vs {lab.shape[0]} labels"
        )
    classes = z.shape[1]
    if lab.size and (lab.min() < 0 or lab.max() >= classes):
        raise LabelOutOfRangeError(f"labels must lie in [0, {classes})")

    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    total = e.sum(axis=-1, keepdims=True)
    log_probs = shifted - np.log(total)
    batch = z.shape[0]
    value = -log_probs[np.arange(batch), lab].mean()
    probs = e / total

    def vjp(g: Array) -> Array:
        gz = probs.copy()
        gz[np.arange(batch), lab] -= 1.0
        gz *= float(g) / batch
        return gz.reshape(a.shape)

    return _result(np.asarray(value), (a,), (vjp,))


# ---------------------------------------------------------------------------
# backward pass and gradient checking


def _topological_order(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tracked tensor.

    Calling twice without :meth:`Tensor.zero_grad` doubles the gradients.
    """
    if loss.data.size != 1:
        raise NonScalarLossError(f"loss must be scalar-shaped, got {loss.shape}")
    order = _topological_order(loss)
    adjoint: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = adjoint.get(id(node))
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g.copy() if node.grad is None else node.grad + g
        for parent, vjp in zip(node._parents, node._vjps):
            if not parent.tracked:
                continue
            contribution = vjp(g)
            key = id(parent)
            if key in adjoint:
                adjoint[key] = adjoint[key] + contribution
            else:
                adjoint[key] = contribution


def finite_diff_check(f, params: Sequence[Tensor], h: float = 1e-5) -> float:
    """Compare tape gradients of ``f(params)`` against central differences.

    Returns the worst relative error |analytic - numeric| / max(1,
    |analytic|, |numeric|) over every coordinate of every parameter. ``f``
    must recompute its value from the parameters' current data on each
    call.
    """
    if not h > 0:
        raise ValueError("step size h must be positive")
    for p in params:
        p.zero_grad()
    loss = f(params)
    backward(loss)
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, ga in zip(params, analytic):
        gflat = ga.reshape(-1)
        for j in range(p.data.size):
            # index rather than a flat view: views of non-contiguous data copy
            where = np.unravel_index(j, p.data.shape)
            original = p.data[where]
            p.data[where] = original + h
            up = float(f(params).data)
            p.data[where] = original - h
            down = float(f(params).data)
            p.data[where] = original
            numeric = (up - down) / (2.0 * h)
            err = abs(gflat[j] - numeric) / max(1.0, abs(gflat[j]), abs(numeric))
            if err > worst:
                worst = err
    return worst
