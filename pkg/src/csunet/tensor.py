"""Reverse-mode automatic differentiation over numpy arrays.

A ``Tensor`` wraps a contiguous float32/float64 ndarray. Every op records a
backward closure and the participating parents on the result; calling
``backward()`` on a scalar replays the recorded closures in exact reverse
execution order (node ids are monotonically increasing, so sorting by id is
the execution order) and accumulates gradients into every leaf that has
``requires_grad`` set. A tensor used twice receives the sum of its per-use
gradients.

The recorded graph is single-use: after ``backward()`` the closures are
dropped so intermediate buffers free immediately, and a second ``backward()``
on the same root raises ``TapeError``.

Results of every op are checked for NaN/Inf (one float64 reduction pass);
non-finite values raise ``FloatingPointError`` at the op that produced them
rather than surfacing later as a corrupted loss.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "TapeError",
    "no_grad",
    "concat",
    "grad_enabled",
]

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
_node_ids = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    """Operand shapes cannot be combined by the op that raised."""


class TapeError(RuntimeError):
    """Invalid backward call: non-scalar root or already-consumed graph."""


def grad_enabled():
    return _grad_enabled


class no_grad:
    """Context manager that disables graph recording (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._saved = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, exc_type, exc, tb):
        global _grad_enabled
        _grad_enabled = self._saved
        return False


def _check_finite(data, op):
    # a single NaN or Inf poisons the float64 sum, so one pass suffices
    if not math.isfinite(float(np.sum(data, dtype=np.float64))):
        raise FloatingPointError(f"{op}: non-finite values in result")


class Tensor:
    """A numpy-backed array node in the autodiff graph.

    Parameters
    ----------
    data : array_like
        Converted to a contiguous float32 or float64 ndarray. Integer input
        is cast to float32.
    requires_grad : bool
        Leaves with ``requires_grad=True`` receive a ``.grad`` array after
        ``backward()``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_nid", "_consumed")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._nid = next(_node_ids)
        self._consumed = False

    # -- construction --------------------------------------------------

    @staticmethod
    def zeros(shape, dtype=np.float32, requires_grad=False):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)

    @staticmethod
    def _from_op(data, parents, backward, op):
        """Wrap an op result, recording the backward closure if needed."""
        _check_finite(data, op)
        needs = _grad_enabled and any(p.requires_grad for p in parents)
        out = Tensor(data, requires_grad=needs)
        if needs:
            out._parents = tuple(p for p in parents if p.requires_grad)
            out._backward = backward
        return out

    # -- inspection ----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() requires a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # -- backward pass -------------------------------------------------

    def backward(self):
        """Run reverse-mode accumulation from this scalar.

        Visits recorded nodes in exact reverse execution order. Leaf grads
        persist; intermediate grads and all closures are dropped afterward
        (the graph is consumed).
        """
        if self.data.size != 1:
            raise TapeError(f"backward requires a scalar, got shape {self.shape}")
        if self._consumed:
            raise TapeError("backward called twice on a consumed graph")
        if not self.requires_grad:
            raise TapeError("backward on a tensor with no recorded graph")

        seen = set()
        nodes = []
        stack = [self]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            nodes.append(t)
            if t._backward is not None:
                stack.extend(t._parents)
        nodes.sort(key=lambda t: t._nid, reverse=True)

        self.grad = np.ones_like(self.data)
        for t in nodes:
            if t._backward is not None and t.grad is not None:
                t._backward(t.grad)
        for t in nodes:
            if t._backward is not None:
                t._backward = None
                t._parents = ()
                t._consumed = True
                t.grad = None
        self._consumed = True

    # -- operators -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, idx):
        return getitem(self, idx)

    # -- elementwise ---------------------------------------------------

    def relu(self):
        mask = self.data > 0
        data = self.data * mask

        def bw(g):
            _accum(self, g * mask)

        return Tensor._from_op(data, (self,), bw, "relu")

    def sigmoid(self):
        x = self.data
        with np.errstate(over="ignore"):
            data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x)))
        data = data.astype(x.dtype, copy=False)

        def bw(g):
            _accum(self, g * data * (1.0 - data))

        return Tensor._from_op(data, (self,), bw, "sigmoid")

    def exp(self):
        data = np.exp(self.data)

        def bw(g):
            _accum(self, g * data)

        return Tensor._from_op(data, (self,), bw, "exp")

    def log(self):
        if np.any(self.data <= 0):
            raise ValueError("log requires strictly positive input")
        data = np.log(self.data)

        def bw(g):
            _accum(self, g / self.data)

        return Tensor._from_op(data, (self,), bw, "log")

    def sqrt(self):
        if np.any(self.data < 0):
            raise ValueError("sqrt requires non-negative input")
        data = np.sqrt(self.data)

        def bw(g):
            _accum(self, g * (0.5 / np.maximum(data, np.finfo(data.dtype).tiny)))

        return Tensor._from_op(data, (self,), bw, "sqrt")

    def clamp(self, lo, hi):
        data = np.clip(self.data, lo, hi)
        mask = (self.data >= lo) & (self.data <= hi)

        def bw(g):
            _accum(self, g * mask)

        return Tensor._from_op(data, (self,), bw, "clamp")

    # -- reductions / shape --------------------------------------------

    def sum(self, axis=None, keepdims=False):
        data = self.data.sum(axis=axis, keepdims=keepdims)

        def bw(g):
            _accum(self, _spread(g, self.data.shape, axis, keepdims))

        return Tensor._from_op(data, (self,), bw, "sum")

    def mean(self, axis=None, keepdims=False):
        data = self.data.mean(axis=axis, keepdims=keepdims)
        n = self.data.size // max(data.size, 1)

        def bw(g):
            _accum(self, _spread(g, self.data.shape, axis, keepdims) / n)

        return Tensor._from_op(data, (self,), bw, "mean")

    def reshape(self, shape):
        src = self.data.shape
        data = self.data.reshape(shape)

        def bw(g):
            _accum(self, np.ascontiguousarray(g).reshape(src))

        return Tensor._from_op(data, (self,), bw, "reshape")


def _as_tensor(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _coerce(a, b):
    if isinstance(a, Tensor):
        return a, _as_tensor(b, a)
    b = b if isinstance(b, Tensor) else Tensor(np.asarray(b))
    return _as_tensor(a, b), b


def _accum(t, g):
    if g.shape != t.data.shape:
        raise ShapeError(f"gradient shape {g.shape} does not match tensor shape {t.data.shape}")
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _spread(g, shape, axis, keepdims):
    """Broadcast a reduction gradient back to the pre-reduction shape."""
    g = np.asarray(g)
    if axis is None:
        return np.full(shape, g.reshape(()), dtype=g.dtype)
    if not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = sorted(a % len(shape) for a in axes)
        expanded = list(g.shape)
        for a in axes:
            expanded.insert(a, 1)
        g = g.reshape(expanded)
    return np.broadcast_to(g, shape).astype(g.dtype, copy=True)


def add(a, b):
    a, b = _coerce(a, b)
    data = a.data + b.data

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.data.shape))

    return Tensor._from_op(data, (a, b), bw, "add")


def sub(a, b):
    a, b = _coerce(a, b)
    data = a.data - b.data

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g, b.data.shape))

    return Tensor._from_op(data, (a, b), bw, "sub")


def mul(a, b):
    a, b = _coerce(a, b)
    data = a.data * b.data

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return Tensor._from_op(data, (a, b), bw, "mul")


def div(a, b):
    a, b = _coerce(a, b)
    data = a.data / b.data

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * data / b.data, b.data.shape))

    return Tensor._from_op(data, (a, b), bw, "div")


def getitem(t, idx):
    data = t.data[idx]
    if not isinstance(data, np.ndarray):
        data = np.asarray(data, dtype=t.data.dtype)

    def bw(g):
        full = np.zeros_like(t.data)
        full[idx] = g
        _accum(t, full)

    return Tensor._from_op(np.ascontiguousarray(data), (t,), bw, "getitem")


def concat(tensors, axis=1):
    """Concatenate tensors along ``axis``; all other extents must match."""
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    base = tensors[0].data.shape
    for t in tensors[1:]:
        s = t.data.shape
        if len(s) != len(base) or any(i != axis and s[i] != base[i] for i in range(len(base))):
            raise ShapeError(f"concat operands disagree off-axis: {base} vs {s} (axis {axis})")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _accum(t, np.ascontiguousarray(g[tuple(sl)]))

    return Tensor._from_op(data, tuple(tensors), bw, "concat")
