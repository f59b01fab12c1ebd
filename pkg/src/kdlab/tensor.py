"""Dense-tensor numerical core with reverse-mode differentiation.

Tensors wrap row-major numpy arrays (float32 or float64). Differentiable
operations execute eagerly and, while a Graph is recording, append a backward
callback to an explicit tape. The tape is already in topological order, so
the backward pass is a single reverse sweep that visits each node once.

Everything is single-threaded and deterministic: identical inputs produce
bitwise-identical outputs, with or without recording.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

from .errors import (
    DegenerateRowError,
    NumericalInstabilityError,
    ShapeError,
)

# Additive-mask sentinel for blocked positions. Large but finite: inf - inf
# inside softmax would produce NaN, while exp(-1e9 - rowmax) underflows to an
# exact 0.0 in both float32 and float64.
NEG_INF = -1e9

# Probability floor applied inside every log so that KLD stays finite when a
# distribution assigns an exact zero.
LOG_FLOOR = 1e-9

_DTYPES = (np.float32, np.float64)


class Tensor:
    """A dense array plus an optional gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _DTYPES:
            arr = arr.astype(np.float32)
        # note: np.ascontiguousarray would promote 0-d scalars to 1-d
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        # Leaf parameters carry a persistent zero buffer so that a parameter
        # not touched by a backward pass reports an exactly-zero gradient.
        self.grad = np.zeros_like(self.data) if self.requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0.0)

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            np.add(self.grad, g, out=self.grad)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # arithmetic sugar; all routed through the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Graph:
    """Explicit recorded compute graph (a tape in execution order)."""

    __slots__ = ("nodes", "_prev")

    def __init__(self):
        self.nodes = []
        self._prev = None

    def __enter__(self):
        global _ACTIVE
        self._prev = _ACTIVE
        _ACTIVE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE
        _ACTIVE = self._prev
        return False

    def backward(self, out):
        """Seed d(out)/d(out) = 1 and sweep the tape in reverse."""
        if out.data.size != 1:
            raise ShapeError(f"backward needs a scalar output, got shape {tuple(out.shape)}")
        out.accumulate_grad(np.ones_like(out.data))
        for node_out, backward_fn in reversed(self.nodes):
            g = node_out.grad
            if g is not None:
                backward_fn(g)


_ACTIVE: Graph | None = None


@contextmanager
def no_grad():
    """Suspend recording; ops run identically but leave no tape entries."""
    global _ACTIVE
    prev = _ACTIVE
    _ACTIVE = None
    try:
        yield
    finally:
        _ACTIVE = prev


def _record(inputs, out_data, backward_fn):
    """Wrap op output; register backward_fn when gradients are wanted."""
    needs = _ACTIVE is not None and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = needs
    out.grad = None
    if needs:
        _ACTIVE.nodes.append((out, backward_fn))
    return out


def _check_same_dtype(a, b, op):
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"{op}: mixed dtypes {a.data.dtype.name} vs {b.data.dtype.name}")


def constant(data, dtype=np.float32):
    return Tensor(np.asarray(data, dtype=dtype))


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "add")
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {tuple(a.shape)} vs {tuple(b.shape)}")

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g)

    return _record((a, b), a.data + b.data, backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "sub")
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes {tuple(a.shape)} vs {tuple(b.shape)}")

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(-g)

    return _record((a, b), a.data - b.data, backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "mul")
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {tuple(a.shape)} vs {tuple(b.shape)}")

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * b.data)
        if b.requires_grad:
            b.accumulate_grad(g * a.data)

    return _record((a, b), a.data * b.data, backward)


def mul_const(a: Tensor, c) -> Tensor:
    """Elementwise multiply by a constant array (no gradient into c)."""
    c = np.asarray(c, dtype=a.data.dtype)

    def backward(g):
        if a.requires_grad:
            ga = g * c
            if ga.shape != a.shape:
                ga = _reduce_to_shape(ga, a.shape)
            a.accumulate_grad(ga)

    return _record((a,), a.data * c, backward)


def _reduce_to_shape(g, shape):
    """Sum a broadcast gradient back down to the original shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def bmul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise multiply with numpy broadcasting between the operands."""
    _check_same_dtype(a, b, "bmul")
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_reduce_to_shape(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_reduce_to_shape(g * a.data, b.shape))

    return _record((a, b), out_data, backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise a / b; b broadcasts against a."""
    _check_same_dtype(a, b, "div")
    out_data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_reduce_to_shape(g / b.data, a.shape))
        if b.requires_grad:
            gb = -g * out_data / b.data
            b.accumulate_grad(_reduce_to_shape(gb, b.shape))

    return _record((a, b), out_data, backward)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * s)

    return _record((a,), a.data * s, backward)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * out_data)

    return _record((a,), out_data, backward)


def log(a: Tensor, floor: float = LOG_FLOOR) -> Tensor:
    """log(max(x, floor)); the clamped region has zero gradient."""
    clamped = np.maximum(a.data, floor)
    out_data = np.log(clamped)

    def backward(g):
        if a.requires_grad:
            ga = g / clamped
            ga = np.where(a.data >= floor, ga, 0.0).astype(a.data.dtype)
            a.accumulate_grad(ga)

    return _record((a,), out_data, backward)


def silu(a: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out_data = a.data * sig

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * (sig * (1.0 + a.data * (1.0 - sig))))

    return _record((a,), out_data, backward)


# ---------------------------------------------------------------------------
# shape ops


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g.reshape(a.shape))

    return _record((a,), np.ascontiguousarray(a.data.reshape(shape)), backward)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(np.ascontiguousarray(g.transpose(inv)))

    return _record((a,), np.ascontiguousarray(a.data.transpose(axes)), backward)


def slice_(a: Tensor, index) -> Tensor:
    """Basic slicing; gradients scatter-add back into the source."""

    def backward(g):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            ga[index] = g
            a.accumulate_grad(ga)

    return _record((a,), np.ascontiguousarray(a.data[index]), backward)


def take_rows(a: Tensor, idx) -> Tensor:
    """Select rows along axis 0 by integer index; scatter-adds gradients."""
    idx = np.asarray(idx, dtype=np.int64)

    def backward(g):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            np.add.at(ga, idx, g)
            a.accumulate_grad(ga)

    return _record((a,), np.ascontiguousarray(a.data[idx]), backward)


def concat(tensors, axis=0) -> Tensor:
    tensors = list(tensors)
    for t in tensors[1:]:
        _check_same_dtype(tensors[0], t, "concat")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        parts = np.split(g, splits, axis=axis)
        for t, p in zip(tensors, parts):
            if t.requires_grad:
                t.accumulate_grad(p)

    return _record(tuple(tensors), np.concatenate([t.data for t in tensors], axis=axis), backward)


# ---------------------------------------------------------------------------
# reductions


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims, dtype=a.data.dtype)
    out_data = np.asarray(out_data, dtype=a.data.dtype)

    def backward(g):
        if a.requires_grad:
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            a.accumulate_grad(np.broadcast_to(gg, a.shape).astype(a.data.dtype, copy=False))

    return _record((a,), out_data, backward)


def mean_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    Either both operands are 2-D, or they share identical leading (batch)
    dimensions. No implicit broadcasting beyond a 2-D right-hand side.
    """
    _check_same_dtype(a, b, "matmul")
    ashape, bshape = tuple(a.shape), tuple(b.shape)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul: operands must be >=2-D, got {ashape} and {bshape}")
    if ashape[-1] != bshape[-2]:
        raise ShapeError(f"matmul: inner extents disagree for shapes {ashape} and {bshape}")
    if a.data.ndim != b.data.ndim and b.data.ndim != 2:
        raise ShapeError(f"matmul: batch ranks disagree for shapes {ashape} and {bshape}")
    if a.data.ndim == b.data.ndim and ashape[:-2] != bshape[:-2]:
        raise ShapeError(f"matmul: batch extents disagree for shapes {ashape} and {bshape}")

    out_data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a.accumulate_grad(ga)
        if b.requires_grad:
            if b.data.ndim == 2 and a.data.ndim > 2:
                k = ashape[-1]
                gb = np.matmul(
                    a.data.reshape(-1, k).T, g.reshape(-1, g.shape[-1])
                )
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b.accumulate_grad(gb)

    return _record((a, b), out_data, backward)


def embedding(weight: Tensor, ids) -> Tensor:
    """Row gather from an embedding table; gradients scatter-add."""
    ids = np.asarray(ids)
    out_data = np.ascontiguousarray(weight.data[ids])

    def backward(g):
        if weight.requires_grad:
            gw = np.zeros_like(weight.data)
            np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[-1]))
            weight.accumulate_grad(gw)

    return _record((weight,), out_data, backward)


def gather_last(a: Tensor, idx) -> Tensor:
    """out[..., 0] = a[..., idx[...]]; used to pick target-token entries."""
    idx = np.asarray(idx, dtype=np.int64)
    expanded = idx[..., None]
    out_data = np.take_along_axis(a.data, expanded, axis=-1)

    def backward(g):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            np.put_along_axis(ga, expanded, g, axis=-1)
            a.accumulate_grad(ga)

    return _record((a,), out_data, backward)


# ---------------------------------------------------------------------------
# fused neural-net ops


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-5) -> Tensor:
    """x / sqrt(mean(x^2, last) + eps) * gain."""
    _check_same_dtype(x, gain, "rms_norm")
    d = x.shape[-1]
    ms = np.mean(np.square(x.data), axis=-1, keepdims=True)
    r = 1.0 / np.sqrt(ms + eps)
    normed = x.data * r
    out_data = normed * gain.data

    def backward(g):
        if x.requires_grad:
            gg = g * gain.data
            dot = np.sum(gg * x.data, axis=-1, keepdims=True)
            gx = r * gg - (r ** 3) * x.data * (dot / d)
            x.accumulate_grad(gx.astype(x.data.dtype, copy=False))
        if gain.requires_grad:
            gr = (g * normed).reshape(-1, d).sum(axis=0)
            gain.accumulate_grad(gr.astype(gain.data.dtype, copy=False))

    return _record((x, gain), out_data, backward)


def rotary(x: Tensor, cos, sin) -> Tensor:
    """Rotate query/key vectors by position-dependent angles.

    x has shape (..., T, dh); cos/sin have shape (T, dh//2) and rotate the
    two halves of the head dimension as (real, imag) pairs.
    """
    dh = x.shape[-1]
    half = dh // 2
    x1 = x.data[..., :half]
    x2 = x.data[..., half:]
    out_data = np.empty_like(x.data)
    out_data[..., :half] = x1 * cos - x2 * sin
    out_data[..., half:] = x1 * sin + x2 * cos

    def backward(g):
        if x.requires_grad:
            g1 = g[..., :half]
            g2 = g[..., half:]
            gx = np.empty_like(g)
            gx[..., :half] = g1 * cos + g2 * sin
            gx[..., half:] = -g1 * sin + g2 * cos
            x.accumulate_grad(gx)

    return _record((x,), out_data, backward)


def masked_softmax(scores: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis with an optional additive mask.

    Mask entries are 0 for allowed positions and NEG_INF for blocked ones;
    blocked positions come out exactly 0. Row sums are accurate to a few
    float32 ulps because the normalizer is accumulated in float64.
    """
    x = scores.data if mask is None else scores.data + np.asarray(mask, dtype=scores.data.dtype)
    m = np.max(x, axis=-1, keepdims=True)
    if mask is not None and np.any(m <= NEG_INF / 2):
        bad = np.argwhere(m[..., 0] <= NEG_INF / 2)[0]
        raise DegenerateRowError(f"softmax row {tuple(int(i) for i in bad)} has no allowed positions")
    e = np.exp(x - m)
    denom = e.sum(axis=-1, keepdims=True, dtype=np.float64).astype(scores.data.dtype)
    p = e / denom

    def backward(g):
        if scores.requires_grad:
            dot = np.sum(g * p, axis=-1, keepdims=True)
            scores.accumulate_grad(p * (g - dot))

    return _record((scores,), p, backward)


def softmax(scores: Tensor) -> Tensor:
    return masked_softmax(scores, mask=None)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f, inputs, eps: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference grads.

    ``f`` maps the given tensors to a scalar Tensor. Each input element is
    perturbed by +-eps and the analytic gradient is compared elementwise as
    |a - n| / max(1e-12, |a| + |n|).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    inputs = list(inputs)
    for t in inputs:
        t.zero_grad()

    graph = Graph()
    with graph:
        out = f(*inputs)
    if not np.all(np.isfinite(out.data)):
        raise NumericalInstabilityError("non-finite function value at the unperturbed point")
    graph.backward(out)

    analytic = []
    for t in inputs:
        if t.grad is None:
            analytic.append(np.zeros_like(t.data))
        else:
            analytic.append(t.grad.copy())

    max_rel = 0.0
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        aflat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                fp = f(*inputs).item()
            flat[i] = orig - eps
            with no_grad():
                fm = f(*inputs).item()
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NumericalInstabilityError(
                    f"non-finite finite-difference value at element {i} of input shape {tuple(t.shape)}"
                )
            numeric = (fp - fm) / (2.0 * eps)
            aval = float(aflat[i])
            if not math.isfinite(aval):
                raise NumericalInstabilityError(
                    f"non-finite analytic gradient at element {i} of input shape {tuple(t.shape)}"
                )
            rel = abs(aval - numeric) / max(1e-12, abs(aval) + abs(numeric))
            if rel > max_rel:
                max_rel = rel
    return max_rel
