"""Reverse-mode differentiation over dense float64 arrays.

Every trainable computation in the package is expressed with the
operations defined here. A :class:`DiffValue` wraps a numpy array and
records the operation that produced it; :func:`backward` walks that record
in reverse topological order and accumulates gradients into every node
that requires them.

Shapes are explicit: elementwise binary operations require equal shapes,
and the only broadcast is :func:`add_bias` (a length-M vector added to
every row of an N x M matrix).
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

LOG_FLOOR = 1e-12


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class SwitchTape:
    """Branch choices of the piecewise-linear ops (relu masks, segment-max winners).

    The first pass under :func:`switch_tape` records them; every later pass
    replays them in call order, so a finite-difference probe sees the same
    linear piece that backpropagation differentiates.
    """

    def __init__(self):
        self.entries: list[np.ndarray] = []
        self.sealed = False
        self.pos = 0

    def take(self, fresh: np.ndarray) -> np.ndarray:
        if not self.sealed:
            self.entries.append(fresh)
            return fresh
        if self.pos >= len(self.entries) or self.entries[self.pos].shape != fresh.shape:
            raise RuntimeError("switch tape replayed against a different computation")
        out = self.entries[self.pos]
        self.pos += 1
        return out


_TAPE: SwitchTape | None = None


@contextmanager
def switch_tape(tape: SwitchTape):
    global _TAPE
    prev, _TAPE = _TAPE, tape
    tape.pos = 0
    try:
        yield tape
    finally:
        _TAPE = prev
        tape.sealed = True


def _switch(fresh: np.ndarray) -> np.ndarray:
    return fresh if _TAPE is None else _TAPE.take(fresh)


class DiffValue:
    """A differentiable tensor node."""

    __slots__ = ("data", "grad", "requires_grad", "parents", "_backward", "op")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: tuple["DiffValue", ...] = (),
        backward: Callable[[np.ndarray], None] | None = None,
        op: str = "",
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.parents = parents
        self._backward = backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"DiffValue(shape={self.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, as_value(other, self.shape))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, as_value(other, self.shape))

    def __rsub__(self, other):
        return sub(as_value(other, self.shape), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(np.broadcast_to(g, self.data.shape), dtype=np.float64)
        else:
            self.grad += g


def as_value(x, shape=None) -> DiffValue:
    if isinstance(x, DiffValue):
        return x
    arr = np.asarray(x, dtype=np.float64)
    if shape is not None and arr.shape != tuple(shape):
        arr = np.broadcast_to(arr, shape).copy()
    return DiffValue(arr)


def constant(x) -> DiffValue:
    return DiffValue(x)


def parameter(x) -> DiffValue:
    return DiffValue(np.array(x, dtype=np.float64), requires_grad=True)


def _result(data, parents: Sequence[DiffValue], backward, op: str) -> DiffValue:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return DiffValue(data, op=op)
    out = DiffValue(data, parents=tuple(parents), backward=backward, op=op)
    out.requires_grad = True
    out.grad = None
    return out


def _same_shape(a: DiffValue, b: DiffValue, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def backward(loss: DiffValue) -> None:
    """Populate ``grad`` on every reachable node that requires it.

    Leaf gradients accumulate across calls; intermediate gradients are
    dropped once propagated, so only leaves hold ``grad`` afterwards. Nodes are visited in a deterministic order.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order: list[DiffValue] = []
    seen: set[int] = set()
    stack: list[tuple[DiffValue, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node.parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    for node in order:
        if node.parents:
            node.grad = None
    loss.grad = np.ones_like(loss.data) if loss.parents else loss.grad + 1.0
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            if node is not loss:
                node.grad = None  # intermediate buffers are not kept


# ---------------------------------------------------------------- elementwise


def add(a: DiffValue, b: DiffValue) -> DiffValue:
    _same_shape(a, b, "add")

    def bw(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a: DiffValue, b: DiffValue) -> DiffValue:
    _same_shape(a, b, "sub")

    def bw(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(-g)

    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a: DiffValue, b: DiffValue) -> DiffValue:
    _same_shape(a, b, "mul")

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return _result(a.data * b.data, (a, b), bw, "mul")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    return g.sum(axis=axes, keepdims=True) if axes else g


def broadcast_mul(a: DiffValue, b: DiffValue) -> DiffValue:
    """Element-wise product with numpy broadcasting; gradients are summed back."""
    out = a.data * b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _result(out, (a, b), bw, "broadcast_mul")


def scale(a: DiffValue, k: float) -> DiffValue:
    def bw(g):
        a._accumulate(g * k)

    return _result(a.data * k, (a,), bw, "scale")


def add_const(a: DiffValue, k) -> DiffValue:
    def bw(g):
        a._accumulate(g)

    return _result(a.data + k, (a,), bw, "add_const")


def add_bias(x: DiffValue, b: DiffValue) -> DiffValue:
    """Row-wise bias: ``x`` is N x M, ``b`` has shape (M,)."""
    if x.data.ndim != 2 or b.shape != (x.shape[1],):
        raise ShapeError(f"add_bias: shape mismatch {x.shape} vs {b.shape}")

    def bw(g):
        if x.requires_grad:
            x._accumulate(g)
        if b.requires_grad:
            b._accumulate(g.sum(axis=0))

    return _result(x.data + b.data, (x, b), bw, "add_bias")


def relu(x: DiffValue) -> DiffValue:
    mask = _switch(x.data > 0)
    out = x.data * mask

    def bw(g):
        x._accumulate(g * mask)

    return _result(out, (x,), bw, "relu")


def sigmoid(x: DiffValue) -> DiffValue:
    z = x.data
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)

    def bw(g):
        x._accumulate(g * out * (1.0 - out))

    return _result(out, (x,), bw, "sigmoid")


def exp(x: DiffValue) -> DiffValue:
    out = np.exp(x.data)

    def bw(g):
        x._accumulate(g * out)

    return _result(out, (x,), bw, "exp")


def log(x: DiffValue, floor: float = LOG_FLOOR) -> DiffValue:
    """Natural log of ``max(x, floor)``; zero gradient where clamped."""
    clamped = np.maximum(x.data, floor)
    live = x.data > floor

    def bw(g):
        x._accumulate(np.where(live, g / clamped, 0.0))

    return _result(np.log(clamped), (x,), bw, "log")


def square(x: DiffValue) -> DiffValue:
    def bw(g):
        x._accumulate(2.0 * g * x.data)

    return _result(x.data * x.data, (x,), bw, "square")


def softmax_rows(x: DiffValue) -> DiffValue:
    if x.data.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        x._accumulate(out * (g - (g * out).sum(axis=1, keepdims=True)))

    return _result(out, (x,), bw, "softmax_rows")


def log_softmax_rows(x: DiffValue) -> DiffValue:
    if x.data.ndim != 2:
        raise ShapeError(f"log_softmax_rows expects a matrix, got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        x._accumulate(g - p * g.sum(axis=1, keepdims=True))

    return _result(out, (x,), bw, "log_softmax_rows")


def mask_grad(x: DiffValue, row_mask: np.ndarray) -> DiffValue:
    """Identity forward; backward zeroes gradient rows where ``row_mask`` is False."""
    m = np.asarray(row_mask, dtype=np.float64).reshape((-1,) + (1,) * (x.data.ndim - 1))

    def bw(g):
        x._accumulate(g * m)

    return _result(x.data.copy(), (x,), bw, "mask_grad")


# ------------------------------------------------------------------- linear


def matmul(a: DiffValue, b: DiffValue) -> DiffValue:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: dimension mismatch {a.shape} @ {b.shape}")

    def bw(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _result(a.data @ b.data, (a, b), bw, "matmul")


def spmm(s, x: DiffValue) -> DiffValue:
    """Constant (sparse or dense) matrix times a differentiable matrix."""
    if s.shape[1] != x.shape[0]:
        raise ShapeError(f"spmm: dimension mismatch {s.shape} @ {x.shape}")
    out = s @ x.data
    if sp.issparse(out):
        out = out.toarray()

    def bw(g):
        gx = s.T @ g
        x._accumulate(gx.toarray() if sp.issparse(gx) else np.asarray(gx))

    return _result(np.asarray(out), (x,), bw, "spmm")


# ---------------------------------------------------------------- reductions


def sum(x: DiffValue, axis=None) -> DiffValue:  # noqa: A001
    out = x.data.sum(axis=axis)

    def bw(g):
        if axis is None:
            x._accumulate(np.broadcast_to(g, x.shape))
        else:
            x._accumulate(np.broadcast_to(np.expand_dims(g, axis), x.shape))

    return _result(np.asarray(out), (x,), bw, "sum")


def mean(x: DiffValue) -> DiffValue:
    n = x.size

    def bw(g):
        x._accumulate(np.broadcast_to(g / n, x.shape))

    return _result(np.asarray(x.data.mean()), (x,), bw, "mean")


# ------------------------------------------------------------------- shaping


def reshape(x: DiffValue, shape) -> DiffValue:
    def bw(g):
        x._accumulate(g.reshape(x.shape))

    return _result(x.data.reshape(shape), (x,), bw, "reshape")


def transpose(x: DiffValue, axes) -> DiffValue:
    inv = np.argsort(axes)

    def bw(g):
        x._accumulate(g.transpose(inv))

    return _result(x.data.transpose(axes), (x,), bw, "transpose")


def repeat(x: DiffValue, n: int, axis: int) -> DiffValue:
    """Repeat a size-1 axis ``n`` times (explicit broadcast)."""
    if x.shape[axis] != 1:
        raise ShapeError(f"repeat: axis {axis} of {x.shape} must have extent 1")

    def bw(g):
        x._accumulate(g.sum(axis=axis, keepdims=True))

    return _result(np.repeat(x.data, n, axis=axis), (x,), bw, "repeat")


def concat(xs: Sequence[DiffValue], axis: int = -1) -> DiffValue:
    sizes = [v.shape[axis] for v in xs]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        for v, part in zip(xs, np.split(g, cuts, axis=axis)):
            if v.requires_grad:
                v._accumulate(part)

    return _result(np.concatenate([v.data for v in xs], axis=axis), tuple(xs), bw, "concat")


def take_rows(x: DiffValue, idx) -> DiffValue:
    idx = np.asarray(idx, dtype=np.int64)

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        x._accumulate(gx)

    return _result(x.data[idx], (x,), bw, "take_rows")


def scatter_rows(x: DiffValue, idx, n_rows: int, fill: np.ndarray) -> DiffValue:
    """Rows of ``x`` placed at ``idx`` of an ``n_rows`` matrix; other rows from ``fill``.

    ``idx`` must not repeat.
    """
    idx = np.asarray(idx, dtype=np.int64)
    out = np.array(fill, dtype=np.float64, copy=True).reshape(n_rows, *x.shape[1:])
    out[idx] = x.data

    def bw(g):
        x._accumulate(g[idx])

    return _result(out, (x,), bw, "scatter_rows")


# ------------------------------------------------------------- structured ops


def _im2col(xp: np.ndarray, kh: int, kw: int, h: int, w: int, dil: int) -> np.ndarray:
    b, _, _, cin = xp.shape
    cols = np.empty((b, h, w, kh * kw * cin))
    k = 0
    for dy in range(kh):
        for dx in range(kw):
            cols[..., k * cin:(k + 1) * cin] = xp[:, dy * dil:dy * dil + h, dx * dil:dx * dil + w, :]
            k += 1
    return cols


def conv2d(x: DiffValue, w: DiffValue, b: DiffValue | None = None, dilation: int = 1) -> DiffValue:
    """Stride-1 'same' convolution, NHWC input, weight (kh, kw, cin, cout)."""
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeError(f"conv2d: incompatible input {x.shape} and kernel {w.shape}")
    kh, kw, cin, cout = w.shape
    bsz, h, wd, _ = x.shape
    ph, pw = (kh // 2) * dilation, (kw // 2) * dilation
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    cols = _im2col(xp, kh, kw, h, wd, dilation).reshape(-1, kh * kw * cin)
    wm = w.data.reshape(-1, cout)
    out = cols @ wm
    if b is not None:
        out += b.data
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        g2 = g.reshape(-1, cout)
        if w.requires_grad:
            w._accumulate((cols.T @ g2).reshape(w.shape))
        if b is not None and b.requires_grad:
            b._accumulate(g2.sum(axis=0))
        if x.requires_grad:
            dcols = (g2 @ wm.T).reshape(bsz, h, wd, kh * kw, cin)
            gxp = np.zeros_like(xp)
            k = 0
            for dy in range(kh):
                for dx in range(kw):
                    gxp[:, dy * dilation:dy * dilation + h, dx * dilation:dx * dilation + wd, :] += dcols[:, :, :, k, :]
                    k += 1
            x._accumulate(gxp[:, ph:ph + h, pw:pw + wd, :])

    return _result(out.reshape(bsz, h, wd, cout), parents, bw, "conv2d")


def segment_max(x: DiffValue, dst, src, n_out: int) -> DiffValue:
    """``out[i] = max_{(i, j) in edges} x[j]`` element-wise; zero for rows with no edge.

    Gradient flows to the first maximising edge (edges ordered by (dst, src)).
    """
    dst = np.asarray(dst, dtype=np.int64)
    src = np.asarray(src, dtype=np.int64)
    d = x.shape[1]
    out = np.zeros((n_out, d))
    if dst.size == 0:
        return _result(out, (x,), lambda g: None, "segment_max")
    order = np.lexsort((src, dst))
    dst_s, src_s = dst[order], src[order]
    starts = np.flatnonzero(np.r_[True, dst_s[1:] != dst_s[:-1]])
    gathered = x.data[src_s]
    vals = np.maximum.reduceat(gathered, starts, axis=0)
    seg_id = np.cumsum(np.r_[False, dst_s[1:] != dst_s[:-1]])
    hit = (gathered == vals[seg_id]).astype(np.int64)
    cs = np.cumsum(hit, axis=0)
    prev = np.vstack([np.zeros((1, d), dtype=np.int64), cs[starts[1:] - 1]])
    first = _switch(hit.astype(bool) & ((cs - prev[seg_id]) == 1))
    out[dst_s[starts]] = np.add.reduceat(gathered * first, starts, axis=0)

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, src_s, g[dst_s] * first)
        x._accumulate(gx)

    return _result(out, (x,), bw, "segment_max")


def parameters_of(values: Iterable[DiffValue]) -> list[DiffValue]:
    return [v for v in values if v.requires_grad]
