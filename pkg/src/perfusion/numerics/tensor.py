"""Dense float64 arrays with define-by-run reverse-mode differentiation.

Every differentiable operation builds a node holding its output array, its
parents and a closure mapping the output cotangent to parent cotangents.
``Tensor.backward`` walks the graph in reverse topological order and
accumulates into the ``grad`` field of leaf tensors that require grad.

Broadcasting is deliberately narrow.  Two operands are compatible when their
shapes are equal, when one is a scalar, when one is a vector matching the
other's last axis, or when both have the same rank and every axis agrees or
is 1 on one side.  Anything else raises :class:`DimensionError`.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from perfusion.errors import ContractError, DegenerateInputError, DimensionError, NumericalError
from perfusion.numerics import kernels

_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording the graph (reference models, sampling, eval)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not kernels.all_finite(arr):
        raise NumericalError(f"non-finite value produced by {what}")


def broadcast_shape(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    if a == b:
        return a
    if a == ():
        return b
    if b == ():
        return a
    if len(a) == 1 and a[0] == b[-1]:
        return b
    if len(b) == 1 and b[0] == a[-1]:
        return a
    if len(a) == len(b) and all(x == y or x == 1 or y == 1 for x, y in zip(a, b)):
        return tuple(max(x, y) for x, y in zip(a, b))
    raise DimensionError(f"shapes {a} and {b} are not broadcast-compatible")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


Backward = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """A float64 array that may participate in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Backward | None = None
        self.name = name

    @classmethod
    def _result(cls, data: np.ndarray, parents: tuple[Tensor, ...], backward: Backward, op: str) -> Tensor:
        _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        needs = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        out._parents = parents if needs else ()
        out._backward = backward if needs else None
        return out

    # -- introspection ---------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.item())

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- graph traversal -------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            raise ContractError("loss does not depend on any tensor with requires_grad")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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

        cotangents: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = cotangents.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                _check_finite(g, "backward")
                if node.grad is None:
                    node.grad = np.array(g, dtype=np.float64).reshape(node.shape)
                else:
                    node.grad += g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in cotangents:
                    cotangents[key] = cotangents[key] + pg
                else:
                    cotangents[key] = pg

    # -- operators -------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


# -----------------------------------------------------------------------------
# elementwise arithmetic
# -----------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return Tensor._result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa) if a.requires_grad else None, _unbroadcast(g, sb) if b.requires_grad else None),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return Tensor._result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa) if a.requires_grad else None, _unbroadcast(-g, sb) if b.requires_grad else None),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    return Tensor._result(
        ad * bd,
        (a, b),
        lambda g: (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        ),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    out = ad / bd
    return Tensor._result(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
        "div",
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(-a.data, (a,), lambda g: (-g,), "neg")


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return Tensor._result(ad * ad, (a,), lambda g: (2.0 * ad * g,), "square")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    if np.any(ad <= 0.0):
        raise NumericalError("log of a non-positive value")
    return Tensor._result(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return Tensor._result(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return Tensor._result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid_np(np.atleast_1d(a.data)).reshape(a.shape)
    return Tensor._result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def log_sigmoid(a) -> Tensor:
    """log(sigmoid(x)) without overflow for large |x|."""
    a = as_tensor(a)
    ad = a.data
    out = -np.logaddexp(0.0, -ad)
    s_neg = _sigmoid_np(np.atleast_1d(-ad)).reshape(a.shape)
    return Tensor._result(out, (a,), lambda g: (g * s_neg,), "log_sigmoid")


def gelu(a) -> Tensor:
    """GeLU, tanh approximation."""
    a = as_tensor(a)
    out, deriv = kernels.gelu_forward(a.data)
    return Tensor._result(out, (a,), lambda g: (g * deriv,), "gelu")


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values; the gradient passes only where the input is inside [lo, hi]."""
    a = as_tensor(a)
    ad = a.data
    inside = (ad >= lo) & (ad <= hi)
    return Tensor._result(np.clip(ad, lo, hi), (a,), lambda g: (g * inside,), "clip")


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "sigmoid": sigmoid,
    "gelu": gelu,
    "square": square,
}


def elementwise(op: str, *inputs) -> Tensor:
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}; expected one of {sorted(_ELEMENTWISE)}") from None
    return fn(*inputs)


# -----------------------------------------------------------------------------
# shape manipulation
# -----------------------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return Tensor._result(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return Tensor._result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(a, i: int, j: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, tuple(axes))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DegenerateInputError("concat of zero tensors")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    ax = axis % out.ndim
    cuts = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return Tensor._result(
        out, tuple(tensors), lambda g: tuple(np.split(g, cuts, axis=ax)), "concat"
    )


def getitem(a, key) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data[key]
    except IndexError as exc:
        raise IndexError(str(exc)) from None
    shape = a.shape

    parts = key if isinstance(key, tuple) else (key,)
    basic = all(isinstance(k, (int, np.integer, slice)) or k is None or k is Ellipsis for k in parts)

    def backward(g):
        full = np.zeros(shape)
        if basic:
            full[key] += g
        else:
            np.add.at(full, key, g)
        return (full,)

    return Tensor._result(np.array(out, dtype=np.float64), (a,), backward, "getitem")


def take(a, indices) -> Tensor:
    """Gather rows along axis 0 (embedding lookup). Repeated indices accumulate."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    n = a.shape[0]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise IndexError(f"row index out of range for table with {n} rows")
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor._result(a.data[idx], (a,), backward, "take")


# -----------------------------------------------------------------------------
# reductions
# -----------------------------------------------------------------------------


def _expand(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))
    return Tensor._result(out, (a,), lambda g: (_expand(g, shape, axis, keepdims),), "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([shape[ax] for ax in axes]))
    if count == 0:
        raise DimensionError("mean over an empty axis")
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))
    return Tensor._result(
        out, (a,), lambda g: (_expand(g, shape, axis, keepdims) / count,), "mean"
    )


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[axis] == 0:
        raise DimensionError("softmax over an empty axis")
    if axis in (-1, x.ndim - 1):
        xd = np.ascontiguousarray(x.data)
        out = kernels.softmax_rows(xd.reshape(-1, xd.shape[-1])).reshape(xd.shape)
    else:
        e = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
        out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._result(out, (x,), backward, "softmax")


def logsumexp(x, axis: int = -1, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[axis] == 0:
        raise DimensionError("logsumexp over an empty axis")
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = m + np.log(s)
    weights = e / s
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * weights,)

    return Tensor._result(np.asarray(out), (x,), backward, "logsumexp")


def cosine_similarity(a, b, axis: int = -1) -> Tensor:
    """Cosine of the angle between ``a`` and ``b`` along ``axis``; broadcasts like ``mul``."""
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    if a.shape[axis] != b.shape[axis]:
        raise DimensionError(f"cosine similarity over unequal lengths {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    na = np.sqrt((ad * ad).sum(axis=axis, keepdims=True))
    nb = np.sqrt((bd * bd).sum(axis=axis, keepdims=True))
    if np.any(na == 0.0) or np.any(nb == 0.0):
        raise DegenerateInputError("cosine similarity of a zero-norm vector")
    dot = (ad * bd).sum(axis=axis, keepdims=True)
    cos = dot / (na * nb)

    def backward(g):
        g = np.expand_dims(g, axis)
        ga = g * (bd / (na * nb) - cos * ad / (na * na))
        gb = g * (ad / (na * nb) - cos * bd / (nb * nb))
        return (_unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape))

    return Tensor._result(np.squeeze(cos, axis=axis), (a, b), backward, "cosine_similarity")


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise DimensionError("layer_norm affine parameters must match the last axis")
    shape = x.shape
    cols = shape[-1]
    gd = np.ascontiguousarray(gamma.data)
    out, xhat, inv = kernels.layer_norm_forward(
        np.ascontiguousarray(x.data).reshape(-1, cols), gd, np.ascontiguousarray(beta.data), float(eps)
    )

    def backward(g):
        g2 = np.ascontiguousarray(g).reshape(-1, cols)
        dx = kernels.layer_norm_backward(g2, xhat, inv, gd).reshape(shape)
        if not gamma.requires_grad and not beta.requires_grad:
            return (dx, None, None)
        return (dx, (g2 * xhat).sum(axis=0), g2.sum(axis=0))

    out = out.reshape(shape)

    return Tensor._result(out, (x, gamma, beta), backward, "layer_norm")


# -----------------------------------------------------------------------------
# linear algebra
# -----------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes.

    Both operands need at least two axes.  Batch axes must match exactly, or
    the right operand may be a plain matrix shared by every batch entry.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"inner dimensions disagree: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"batch dimensions disagree: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        if not b.requires_grad:
            gb = None
        elif bd.ndim == 2:
            k, n = bd.shape
            gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return Tensor._result(out, (a, b), backward, "matmul")


def affine(x, w, b) -> Tensor:
    """``x @ w + b`` for a matrix ``x`` as one node (the bias add is done in place)."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 2 or w.ndim != 2 or b.shape != (w.shape[1],):
        raise DimensionError(f"affine needs (n, k) @ (k, m) + (m,), got {x.shape}, {w.shape}, {b.shape}")
    if x.shape[1] != w.shape[0]:
        raise DimensionError(f"inner dimensions disagree: {x.shape} @ {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd
    out += b.data

    def backward(g):
        return (
            g @ wd.T if x.requires_grad else None,
            xd.T @ g if w.requires_grad else None,
            g.sum(axis=0) if b.requires_grad else None,
        )

    return Tensor._result(out, (x, w, b), backward, "affine")


def parameters_finite(params: Iterable[Tensor]) -> bool:
    return all(np.isfinite(p.data).all() for p in params)
