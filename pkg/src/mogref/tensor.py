"""Dense float64 tensors with reverse-mode automatic differentiation.

A small dynamic-graph engine: every operation stores a backward closure on
its output, and :func:`backward` walks the graph in reverse topological
order, accumulating d(loss)/d(leaf) into each leaf's ``.grad``. Everything
is 64-bit and deterministic; there is no device or dtype story. Shapes
broadcast only in the numpy sense needed here (leading batch axes and
trailing bias adds).

Masked softmax is the one numerically delicate op: masked logits are
replaced by -inf before the stable exponential, which makes masked output
entries exactly 0.0 (``exp(-inf) == 0``) rather than merely small.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DegenerateMaskError(ValueError):
    """A softmax mask row admits no positions at all."""


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    # make numpy refuse silent mixed arithmetic (ndarray + Tensor)
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None

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
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; scalars and arrays are wrapped as constants
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """Named trainable leaf; ``grad`` starts as zeros of the same shape."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, g: np.ndarray, own: bool = False) -> None:
    """Add ``g`` into ``t.grad``.

    ``own=True`` promises ``g`` is not aliased by any other accumulation
    target, so the first contribution can take the buffer instead of
    copying. Views of an upstream ``.grad`` qualify: a node's gradient is
    finalized before its own backward runs and never read again after.
    """
    if t.grad is None:
        t.grad = g if own else g.copy()
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward op."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    squeeze = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if squeeze:
        g = g.sum(axis=squeeze, keepdims=True)
    return g


def _node(data: np.ndarray, parents: Sequence[Tensor], bwd: Callable[[np.ndarray], None]) -> Tensor:
    """Build an output node; ``bwd`` receives the output gradient."""
    grads_needed = [p for p in parents if p.requires_grad]
    out = Tensor(data)
    if grads_needed:
        out.requires_grad = True
        out._parents = tuple(grads_needed)
        out._backward = lambda: bwd(out.grad)
    return out


def zero_grads(params) -> None:
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
        else:
            p.grad.fill(0.0)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``.grad``.

    Repeated calls add up; call :func:`zero_grads` between steps. Leaf
    gradients persist across walks; interior-node gradients are scratch
    space and are reset at the start of every walk (which also makes
    re-running backward on the same recorded graph count each path once).
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    for node in topo:
        if node._backward is not None:
            node.grad = None
    _accum(loss, np.ones_like(loss.data), own=True)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward()


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data + b.data

    def bwd(g):
        first = True
        if a.requires_grad:
            ga = _unbroadcast(g, a.data.shape)
            _accum(a, ga, own=first or ga is not g)
            first = False
        if b.requires_grad:
            gb = _unbroadcast(g, b.data.shape)
            _accum(b, gb, own=first or gb is not g)

    return _node(data, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data - b.data

    def bwd(g):
        first = True
        if a.requires_grad:
            ga = _unbroadcast(g, a.data.shape)
            _accum(a, ga, own=first or ga is not g)
            first = False
        if b.requires_grad:
            _accum(b, _unbroadcast(-g, b.data.shape), own=True)

    return _node(data, (a, b), bwd)


def neg(a) -> Tensor:
    a = _wrap(a)

    def bwd(g):
        _accum(a, -g, own=True)

    return _node(-a.data, (a,), bwd)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.data.shape), own=True)
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.data.shape), own=True)

    return _node(data, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data / b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.data.shape), own=True)
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * data / b.data, b.data.shape), own=True)

    return _node(data, (a, b), bwd)


def absolute(a) -> Tensor:
    a = _wrap(a)
    data = np.abs(a.data)
    sign = np.sign(a.data)

    def bwd(g):
        _accum(a, g * sign, own=True)

    return _node(data, (a,), bwd)


def log(a) -> Tensor:
    a = _wrap(a)
    data = np.log(a.data)

    def bwd(g):
        _accum(a, g / a.data, own=True)

    return _node(data, (a,), bwd)


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the gradient to the first argument."""
    a, b = _wrap(a), _wrap(b)
    data = np.maximum(a.data, b.data)
    take_a = a.data >= b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * take_a, a.data.shape), own=True)
        if b.requires_grad:
            _accum(b, _unbroadcast(g * ~take_a, b.data.shape), own=True)

    return _node(data, (a, b), bwd)


def minimum(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = np.minimum(a.data, b.data)
    take_a = a.data <= b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * take_a, a.data.shape), own=True)
        if b.requires_grad:
            _accum(b, _unbroadcast(g * ~take_a, b.data.shape), own=True)

    return _node(data, (a, b), bwd)


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    x = a.data
    data = np.empty_like(x)
    pos = x >= 0
    data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    data[~pos] = ex / (1.0 + ex)

    def bwd(g):
        _accum(a, g * data * (1.0 - data), own=True)

    return _node(data, (a,), bwd)


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(a) -> Tensor:
    """tanh-form GELU; smooth everywhere, so finite differences behave."""
    a = _wrap(a)
    x = a.data
    inner = _GELU_C * (x + _GELU_A * x**3)
    t = np.tanh(inner)
    data = 0.5 * x * (1.0 + t)

    def bwd(g):
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
        _accum(a, g * d, own=True)

    return _node(data, (a,), bwd)


# ---------------------------------------------------------------------------
# shape plumbing
# ---------------------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    shape = tuple(int(s) for s in shape)
    if math.prod(shape) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}")
    orig = a.data.shape

    def bwd(g):
        _accum(a, g.reshape(orig), own=True)

    return _node(a.data.reshape(shape), (a,), bwd)


def transpose(a, axes) -> Tensor:
    a = _wrap(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def bwd(g):
        _accum(a, g.transpose(inverse), own=True)

    return _node(a.data.transpose(axes), (a,), bwd)


def concat(tensors, axis: int) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    if not ts:
        raise ShapeError("concat needs at least one tensor")
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(int(lo), int(hi))
                _accum(t, g[tuple(sl)], own=True)  # disjoint views of g

    return _node(data, tuple(ts), bwd)


def select(a, index: int, axis: int = 0) -> Tensor:
    """Pick one slice along ``axis``; the axis disappears from the result."""
    a = _wrap(a)
    sl = (slice(None),) * axis + (int(index),)

    def bwd(g):
        buf = np.zeros_like(a.data)
        buf[sl] = g
        _accum(a, buf, own=True)

    return _node(a.data[sl], (a,), bwd)


def take_rows(a, indices) -> Tensor:
    """Gather along the first axis (embedding-table style lookup)."""
    a = _wrap(a)
    idx = np.asarray(indices, dtype=np.intp)
    data = a.data[idx]

    def bwd(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        np.add.at(a.grad, idx, g)

    return _node(data, (a,), bwd)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def tsum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape).copy(), own=True)

    return _node(data, (a,), bwd)


def mean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.size if axis is None else a.data.shape[axis]

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape) / count, own=True)

    return _node(data, (a,), bwd)


def mean_pool(a, axis: int = 1) -> Tensor:
    """Average over the token axis of a batched sequence."""
    return mean(a, axis=axis)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as exc:  # mismatched broadcast on batch axes
        raise ShapeError(f"matmul batch shapes disagree: {a.shape} @ {b.shape}") from exc

    def bwd(g):
        if a.requires_grad:
            ga = np.matmul(g, b.data.swapaxes(-1, -2))
            _accum(a, _unbroadcast(ga, a.data.shape), own=True)
        if b.requires_grad:
            gb = np.matmul(a.data.swapaxes(-1, -2), g)
            _accum(b, _unbroadcast(gb, b.data.shape), own=True)

    return _node(data, (a, b), bwd)


# ---------------------------------------------------------------------------
# normalization and softmax
# ---------------------------------------------------------------------------


def layernorm(a, eps: float = 1e-5) -> Tensor:
    """Zero-mean unit-variance normalization over the last axis (no affine).

    ``eps`` sits inside the square root, so a constant row maps to exact
    zeros instead of dividing by zero.
    """
    a = _wrap(a)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    data = centered * inv

    def bwd(g):
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * data).mean(axis=-1, keepdims=True)
        _accum(a, inv * (g - gm - data * gym), own=True)

    return _node(data, (a,), bwd)


def _mask_bits(mask) -> np.ndarray:
    if isinstance(mask, Tensor):
        mask = mask.data
    bits = getattr(mask, "bits", mask)  # GranularityMask carries .bits
    return np.asarray(bits, dtype=bool)


def softmax(a) -> Tensor:
    a = _wrap(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        _accum(a, data * (g - (g * data).sum(axis=-1, keepdims=True)), own=True)

    return _node(data, (a,), bwd)


def masked_softmax(logits, mask) -> Tensor:
    """Softmax over the last axis restricted to ``mask``'s support.

    Masked positions come out exactly 0.0 (bit-level), unmasked rows sum to
    one. The mask is a constant: no gradient flows into it, and the
    gradient at masked logits is exactly zero.
    """
    a = _wrap(logits)
    bits = _mask_bits(mask)
    try:
        m = np.broadcast_to(bits, a.data.shape)
    except ValueError as exc:
        raise ShapeError(f"mask shape {bits.shape} does not broadcast to logits {a.shape}") from exc
    row_ok = m.any(axis=-1)
    if not row_ok.all():
        bad = int(np.count_nonzero(~row_ok))
        raise DegenerateMaskError(f"masked_softmax: {bad} mask row(s) have empty support")
    shifted = np.where(m, a.data, -np.inf)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    e = np.exp(shifted)  # exp(-inf) == 0.0 exactly
    data = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        _accum(a, data * (g - (g * data).sum(axis=-1, keepdims=True)), own=True)

    return _node(data, (a,), bwd)
