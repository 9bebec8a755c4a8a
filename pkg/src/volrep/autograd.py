"""Reverse-mode autodiff on float64 numpy arrays.

Every op records a vector-Jacobian closure on a tape ordered by construction.
backward() replays the tape in strictly decreasing construction order, which
makes gradient accumulation bit-exact across runs of the same computation.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager

import numpy as np
from scipy.special import erf

from .errors import DegenerateVectorError, NumericError, ShapeMismatchError

_COUNTER = itertools.count()
_GRAD_ENABLED = True

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


@contextmanager
def no_grad():
    """Disable tape recording inside the block (forward-only evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A float64 array plus an optional gradient slot and tape record."""

    __slots__ = ("data", "requires_grad", "grad", "_vjp", "_parents", "_order",
                 "_backward_done")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._vjp = None
        self._parents = ()
        self._order = next(_COUNTER)
        self._backward_done = False

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.item())

    @property
    def value(self) -> float:
        """Scalar payload; the loss value when this tensor is a ScalarLoss."""
        return float(self.data.item())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- gradient machinery ---------------------------------------------------

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        """Reverse accumulation from a scalar. A second call on the same
        tape raises (no silent re-accumulation)."""
        if self.data.size != 1:
            raise ShapeMismatchError(
                f"backward requires a scalar, got shape {self.shape}")
        if self._backward_done:
            raise RuntimeError("backward already run on this tape")
        self._backward_done = True

        # Reachable subgraph, replayed in decreasing construction order so
        # a node's grad is complete before its vjp fires.
        nodes = []
        seen = set()
        stack = [self]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t._parents)
        nodes.sort(key=lambda t: t._order, reverse=True)

        self._accumulate(np.ones_like(self.data))
        for t in nodes:
            if t._vjp is not None and t.grad is not None:
                t._vjp(t.grad)

    # -- operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, key):
        return take(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


# ScalarLoss is a scalar Tensor whose tape is the recorded graph.
ScalarLoss = Tensor


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    """Wrap data as a non-trainable tensor (no gradient ever flows out)."""
    return Tensor(x, requires_grad=False)


def parameter(x) -> Tensor:
    return Tensor(x, requires_grad=True)


def backward(loss: Tensor) -> None:
    """Run reverse accumulation from a ScalarLoss."""
    loss.backward()


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


def _make(data: np.ndarray, parents, vjp) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum g down to `shape` (reverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise arithmetic ---------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(a.data / b.data, (a, b), vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        if a.requires_grad:
            a._accumulate(-g)

    return _make(-a.data, (a,), vjp)


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)

    def vjp(g):
        if a.requires_grad:
            a._accumulate(g * p * np.power(a.data, p - 1.0))

    return _make(np.power(a.data, p), (a,), vjp)


# -- linear algebra -----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatchError(
            f"matmul requires >=2-d operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError(
            f"matmul inner dimensions disagree: {a.shape} x {b.shape}")

    def vjp(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accumulate(_unbroadcast(gb, b.shape))

    return _make(a.data @ b.data, (a, b), vjp)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)

    def vjp(g):
        if a.requires_grad:
            a._accumulate(np.transpose(g, inv))

    return _make(np.transpose(a.data, axes), (a,), vjp)


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        if a.requires_grad:
            a._accumulate(np.swapaxes(g, ax1, ax2))

    return _make(np.swapaxes(a.data, ax1, ax2), (a,), vjp)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape))

    return _make(np.ascontiguousarray(a.data.reshape(shape)), (a,), vjp)


def take(a, key) -> Tensor:
    """Numpy indexing with scatter-add pullback."""
    a = as_tensor(a)

    def vjp(g):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            np.add.at(ga, key, g)
            a._accumulate(ga)

    return _make(np.ascontiguousarray(a.data[key]), (a,), vjp)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def vjp(g):
        parts = np.moveaxis(g, axis, 0)
        for t, gt in zip(tensors, parts):
            if t.requires_grad:
                t._accumulate(np.ascontiguousarray(gt))

    return _make(np.stack([t.data for t in tensors], axis=axis), tensors, vjp)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(np.ascontiguousarray(g[tuple(idx)]))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, vjp)


# -- reductions ---------------------------------------------------------------

def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        if a.requires_grad:
            gg = g
            if not keepdims and axis is not None:
                gg = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(gg, a.shape).copy())

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[i] for i in axes]))

    def vjp(g):
        if a.requires_grad:
            gg = g
            if not keepdims and axis is not None:
                gg = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(gg, a.shape) / count)

    return _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), vjp)


# -- nonlinearities -----------------------------------------------------------

def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def vjp(g):
        if a.requires_grad:
            a._accumulate(g * out_data)

    return _make(out_data, (a,), vjp)


def log(a) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        if a.requires_grad:
            a._accumulate(g / a.data)

    return _make(np.log(a.data), (a,), vjp)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.sqrt(a.data)

    def vjp(g):
        if a.requires_grad:
            a._accumulate(g * 0.5 / out_data)

    return _make(out_data, (a,), vjp)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.tanh(a.data)

    def vjp(g):
        if a.requires_grad:
            a._accumulate(g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), vjp)


def relu(a) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        if a.requires_grad:
            a._accumulate(g * (a.data > 0.0))

    return _make(np.maximum(a.data, 0.0), (a,), vjp)


def gelu(a) -> Tensor:
    """Exact erf-based GELU (smooth, so finite differences stay clean)."""
    a = as_tensor(a)
    cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))

    def vjp(g):
        if a.requires_grad:
            pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT2PI
            a._accumulate(g * (cdf + a.data * pdf))

    return _make(a.data * cdf, (a,), vjp)


# -- softmax family -----------------------------------------------------------

def softmax(a, axis: int = -1) -> Tensor:
    """Row-max-stabilized softmax along `axis`."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        if a.requires_grad:
            dot = (g * out_data).sum(axis=axis, keepdims=True)
            a._accumulate(out_data * (g - dot))

    return _make(out_data, (a,), vjp)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse

    def vjp(g):
        if a.requires_grad:
            a._accumulate(g - np.exp(out_data) * g.sum(axis=axis, keepdims=True))

    return _make(out_data, (a,), vjp)


def softmax_rows(x) -> Tensor:
    """Softmax over the rows of a 2-d tensor; rejects NaN input."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeMismatchError(f"softmax_rows expects 2-d input, got {x.shape}")
    if np.isnan(x.data).any():
        raise NumericError("softmax_rows received NaN input")
    return softmax(x, axis=-1)


# -- spec-level scalar ops ------------------------------------------------------

def cosine_sim(a, b, eps: float = 1e-12) -> Tensor:
    """cos(a, b) for 1-d vectors; errors out on (near-)zero norms rather
    than clamping, so degenerate features surface as failures."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeMismatchError(
            f"cosine_sim expects matching 1-d vectors, got {a.shape} and {b.shape}")
    na = float(np.linalg.norm(a.data))
    nb = float(np.linalg.norm(b.data))
    if na <= eps or nb <= eps:
        raise DegenerateVectorError(
            f"cosine_sim norm below epsilon: |a|={na:.3e}, |b|={nb:.3e}")
    dot = tsum(mul(a, b))
    return div(dot, sqrt(mul(tsum(mul(a, a)), tsum(mul(b, b)))))


def mse(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"mse shapes disagree: {a.shape} vs {b.shape}")
    d = sub(a, b)
    return tmean(mul(d, d))


def cross_entropy(logits, targets) -> Tensor:
    """Mean negative log-probability of `targets` under row-softmax of logits."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeMismatchError(
            f"cross_entropy expects 2-d logits, got {logits.shape}")
    idx = np.asarray(targets, dtype=np.int64)
    n, v = logits.shape
    if idx.ndim != 1 or idx.shape[0] != n:
        raise ShapeMismatchError(
            f"cross_entropy expects {n} targets, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= v):
        raise IndexError(
            f"cross_entropy target out of range [0, {v}): {idx.min()}..{idx.max()}")
    lp = log_softmax(logits, axis=-1)
    picked = take(lp, (np.arange(n), idx))
    return neg(tmean(picked))


def l2_normalize(a, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """x / ||x|| along `axis` (norms assumed nondegenerate)."""
    a = as_tensor(a)
    sq = tsum(mul(a, a), axis=axis, keepdims=True)
    return div(a, sqrt(add(sq, eps)))
