"""Dense float64 tensors with reverse-mode autodiff and MAC accounting.

The kernel is intentionally small: just enough operations to express the
pose lifter, its losses, and the cost instrumentation. Values live in numpy
arrays; every differentiable operation executed while a Tape is active
appends an entry (inputs, output, backward rule) to that tape, so creation
order is already a topological order and the reverse sweep is a single walk
over the entries.

Cost accounting follows the multiply-accumulate convention: a matmul of an
(a x b) by a (b x c) operand contributes exactly a*b*c MACs. Elementwise
work (additions, nonlinearities, normalization) is never mixed into the MAC
totals; it is tallied in a separate per-scope counter so empirical reports
can still mention it.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager

import numpy as np
from scipy.special import erf, expit


class ShapeError(ValueError):
    """Operand shapes do not satisfy an operation's contract."""


class TapeError(RuntimeError):
    """backward() was asked to differentiate something no tape recorded."""


_STATE = threading.local()


def _tape_stack():
    stack = getattr(_STATE, "tapes", None)
    if stack is None:
        stack = []
        _STATE.tapes = stack
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


def _counter():
    return getattr(_STATE, "counter", None)


def strict_finite(enabled: bool) -> None:
    """Toggle per-operation finiteness checks (off by default; used in tests)."""
    _STATE.strict = bool(enabled)


def _check(arr, op):
    if getattr(_STATE, "strict", False) and not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    return arr


class Tensor:
    """A float64 array plus an optional gradient buffer of the same shape."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # operator sugar; all routed through the module-level ops below
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


class _Entry:
    __slots__ = ("out", "inputs", "back")

    def __init__(self, out, inputs, back):
        self.out = out
        self.inputs = inputs
        self.back = back


class Tape:
    """Ordered record of operations; context manager makes it the active tape."""

    def __init__(self):
        self.entries: list[_Entry] = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self.entries)


def backward(loss: Tensor) -> None:
    """Reverse sweep from a scalar recorded on a tape.

    Gradients accumulate (+=) into ``.grad`` of every tensor with
    ``requires_grad`` that contributed to the loss.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    tape = loss._tape
    if tape is None:
        raise TapeError("loss was not recorded on an active tape")
    loss.grad = np.ones_like(loss.data)
    for entry in reversed(tape.entries):
        gout = entry.out.grad
        if gout is None:
            continue
        grads = entry.back(gout)
        for t, g in zip(entry.inputs, grads):
            if g is None or not t.requires_grad:
                continue
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            t.grad += g


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(out_data, inputs, back, op: str) -> Tensor:
    out = Tensor(_check(out_data, op))
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        tape.entries.append(_Entry(out, tuple(inputs), back))
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcasted gradient back down to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _tally_elementwise(n: int):
    c = _counter()
    if c is not None:
        c.add_elementwise(n)


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    _tally_elementwise(out.size)

    def back(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _emit(out, (a, b), back, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    _tally_elementwise(out.size)

    def back(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _emit(out, (a, b), back, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    _tally_elementwise(out.size)

    def back(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _emit(out, (a, b), back, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    _tally_elementwise(out.size)

    def back(g):
        return (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        )

    return _emit(out, (a, b), back, "div")


def matmul(a, b) -> Tensor:
    """Matrix product; the only source of MACs in the whole kernel.

    Supported operand patterns:
      * ``(..., n, k) @ (k, m)`` -- shared weight applied across leading dims;
      * ``(B..., n, k) @ (B..., k, m)`` -- stacked product, equal batch dims.
    """
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError("matmul operands must have rank >= 2")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {ad.shape} @ {bd.shape}")
    k, m = ad.shape[-1], bd.shape[-1]

    if bd.ndim == 2:
        macs = (ad.size // k) * k * m

        def back(g):
            ga = g @ bd.T
            gb = ad.reshape(-1, k).T @ g.reshape(-1, m)
            return ga, gb

    else:
        if ad.shape[:-2] != bd.shape[:-2]:
            raise ShapeError(
                f"stacked matmul batch dims differ: {ad.shape} @ {bd.shape}"
            )
        macs = (ad.size // k) * k * m

        def back(g):
            return g @ bd.swapaxes(-1, -2), ad.swapaxes(-1, -2) @ g

    c = _counter()
    if c is not None:
        c.add_macs(macs)
    return _emit(ad @ bd, (a, b), back, "matmul")


# ---------------------------------------------------------------------------
# structure


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.data.shape

    def back(g):
        return (g.reshape(old),)

    return _emit(x.data.reshape(shape), (x,), back, "reshape")


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def back(g):
        return (g.transpose(inv),)

    return _emit(x.data.transpose(axes), (x,), back, "transpose")


def take(x, indices, axis: int = 0) -> Tensor:
    """Gather slices along ``axis``; repeated indices are allowed.

    The backward rule scatter-adds, so a gather followed by a gather with the
    inverse permutation is an exact identity in both directions.
    """
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError("take expects a flat index list")
    n = x.data.shape[axis]
    if idx.size and (idx.min() < -0 or idx.max() >= n):
        raise IndexError(f"take index out of range for axis of length {n}")
    out = np.take(x.data, idx, axis=axis)
    slicer = (slice(None),) * axis

    def back(g):
        buf = np.zeros_like(x.data)
        np.add.at(buf, slicer + (idx,), g)
        return (buf,)

    return _emit(out, (x,), back, "take")


def strided_gather(x, indices) -> Tensor:
    """Row gather on the leading axis (used to pull out skipped-sampling sets)."""
    return take(x, indices, axis=0)


def inverse_permutation(perm) -> np.ndarray:
    perm = np.asarray(perm, dtype=np.intp)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size, dtype=np.intp)
    return inv


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _emit(
        np.concatenate([t.data for t in tensors], axis=axis), tensors, back, "concat"
    )


# ---------------------------------------------------------------------------
# reductions


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)
    _tally_elementwise(x.data.size)
    shape = x.data.shape

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, shape).copy(),)

    return _emit(out, (x,), back, "sum")


def tmean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.mean(axis=axis, keepdims=keepdims)
    _tally_elementwise(x.data.size)
    shape = x.data.shape
    count = x.data.size if axis is None else shape[axis]

    def back(g):
        if axis is None:
            return (np.broadcast_to(g / count, shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2 / count, shape).copy(),)

    return _emit(out, (x,), back, "mean")


# ---------------------------------------------------------------------------
# nonlinearities


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    _tally_elementwise(4 * y.size)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _emit(y, (x,), back, "softmax")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = expit(x.data)
    _tally_elementwise(y.size)

    def back(g):
        return (g * y * (1.0 - y),)

    return _emit(y, (x,), back, "sigmoid")


def relu(x) -> Tensor:
    x = as_tensor(x)
    y = np.maximum(x.data, 0.0)
    _tally_elementwise(y.size)

    def back(g):
        return (g * (x.data > 0.0),)

    return _emit(y, (x,), back, "relu")


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x) -> Tensor:
    """Exact (erf-based) GELU: x * Phi(x)."""
    x = as_tensor(x)
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    y = xd * cdf
    _tally_elementwise(y.size)

    def back(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT_2PI
        return (g * (cdf + xd * pdf),)

    return _emit(y, (x,), back, "gelu")


def tabs(x) -> Tensor:
    x = as_tensor(x)
    _tally_elementwise(x.data.size)

    def back(g):
        return (g * np.sign(x.data),)

    return _emit(np.abs(x.data), (x,), back, "abs")


def square(x) -> Tensor:
    x = as_tensor(x)
    _tally_elementwise(x.data.size)

    def back(g):
        return (g * 2.0 * x.data,)

    return _emit(x.data * x.data, (x,), back, "square")


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    y = np.sqrt(x.data)
    _tally_elementwise(x.data.size)

    def back(g):
        return (g / (2.0 * y),)

    return _emit(y, (x,), back, "sqrt")


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply elementwise affine."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    n = x.data.shape[-1]
    if gain.data.shape != (n,) or bias.data.shape != (n,):
        raise ShapeError(
            f"layer_norm affine must have shape ({n},), "
            f"got {gain.data.shape} and {bias.data.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    yhat = xc * inv
    out = yhat * gain.data + bias.data
    _tally_elementwise(8 * out.size)

    def back(g):
        gy = g * gain.data
        gx = inv * (
            gy
            - gy.mean(axis=-1, keepdims=True)
            - yhat * (gy * yhat).mean(axis=-1, keepdims=True)
        )
        gg = (g * yhat).reshape(-1, n).sum(axis=0)
        gb = g.reshape(-1, n).sum(axis=0)
        return gx, gg, gb

    return _emit(out, (x, gain, bias), back, "layer_norm")


# ---------------------------------------------------------------------------
# MAC accounting


class FlopCounter:
    """Per-scope multiply-accumulate totals, with elementwise work kept apart.

    Scopes are flat labels pushed by the model at instrumentation points;
    when scopes nest, work is attributed to the innermost label.
    """

    def __init__(self):
        self.macs: dict[str, int] = {}
        self.elementwise: dict[str, int] = {}
        self._stack: list[str] = []

    @contextmanager
    def scope(self, label: str):
        self._stack.append(label)
        try:
            yield self
        finally:
            self._stack.pop()

    def _label(self) -> str:
        return self._stack[-1] if self._stack else "unscoped"

    def add_macs(self, n: int) -> None:
        lbl = self._label()
        self.macs[lbl] = self.macs.get(lbl, 0) + int(n)

    def add_elementwise(self, n: int) -> None:
        lbl = self._label()
        self.elementwise[lbl] = self.elementwise.get(lbl, 0) + int(n)

    def total_macs(self, prefix: str | None = None) -> int:
        if prefix is None:
            return sum(self.macs.values())
        return sum(v for k, v in self.macs.items() if k.startswith(prefix))


@contextmanager
def counting(counter: FlopCounter):
    """Route MAC/elementwise tallies of enclosed operations into ``counter``."""
    prev = getattr(_STATE, "counter", None)
    _STATE.counter = counter
    try:
        yield counter
    finally:
        _STATE.counter = prev


@contextmanager
def flop_scope(label: str):
    """Open a counting scope if a counter is active, else do nothing."""
    c = _counter()
    if c is None:
        yield
    else:
        with c.scope(label):
            yield


# ---------------------------------------------------------------------------
# parameter initialization


def uniform_param(rng: np.random.Generator, shape, fan_in: int | None = None) -> Tensor:
    """Seeded uniform init in [-sqrt(1/fan_in), +sqrt(1/fan_in)]."""
    if fan_in is None:
        fan_in = shape[0] if len(shape) > 1 else shape[-1]
    bound = math.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)
