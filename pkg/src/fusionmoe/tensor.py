"""Dense tensors with reverse-mode automatic differentiation.

Arrays of rank <= 3 backed by numpy.  Every differentiable operation appends
an entry to the active gradient tape; :func:`backward` replays the tape in
reverse execution order (which is a valid topological order) and accumulates
gradients into leaf tensors.  Gradients accumulate across repeated backward
calls until reset with :func:`zero_grad`.

Broadcasting in elementwise ops is restricted to: identical shapes, a scalar
operand, a trailing bias vector, or equal-rank shapes with size-1 axes.  Any
op producing NaN/Inf raises :class:`NumericFault` naming the op.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested op."""


class NumericFault(ArithmeticError):
    """An op produced NaN or Inf from finite inputs."""

    def __init__(self, op: str, detail: str = ""):
        self.op = op
        msg = f"non-finite values produced by op '{op}'"
        if detail:
            msg = f"{msg}: {detail}"
        super().__init__(msg)


class TapeEntry:
    """One recorded op: inputs, output and the closure propagating grads."""

    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op, inputs, output, backward_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of ops; usable as a context manager to scope recording.

    Entries are appended in execution order, so the reversed list is a valid
    topological order and backward visits each entry exactly once.
    """

    def __init__(self):
        self.entries: list[TapeEntry] = []

    def clear(self):
        self.entries.clear()

    def __len__(self):
        return len(self.entries)

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPES.pop()
        return False


_TAPES: list[Tape] = [Tape()]
_GRAD_ENABLED = True


def active_tape() -> Tape:
    return _TAPES[-1]


def reset_default_tape():
    """Drop all entries recorded on the ambient (bottom-of-stack) tape."""
    _TAPES[0].clear()


class no_grad:
    """Context manager disabling tape recording (e.g. for evaluation)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, exc_type, exc, tb):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    """Dense real array (rank <= 3) participating in gradient recording."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        if arr.ndim > 3:
            raise ShapeError(f"rank {arr.ndim} exceeds the supported maximum of 3")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    @classmethod
    def _make(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        """Trusted fast path for op outputs: skips array validation."""
        out = object.__new__(cls)
        out.data = arr
        out.grad = None
        out.requires_grad = requires_grad
        return out

    # -- introspection -----------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- graph control -----------------------------------------------------

    def detach(self) -> "Tensor":
        """Constant view of the same values; no gradient flows upstream."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    # -- operators ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        if isinstance(other, Tensor):
            return div(other, self)
        return mul(pow_const(self, -1.0), other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow_const(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- reductions / shaping as methods ------------------------------------

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)


# ---------------------------------------------------------------------------
# op machinery
# ---------------------------------------------------------------------------

BackwardFn = Callable[[np.ndarray], tuple]


def _from_op(op: str, out_data: np.ndarray, inputs: tuple[Tensor, ...],
             backward_fn: BackwardFn, check: bool = True) -> Tensor:
    # check=False only for pure data-movement ops, which cannot produce a
    # non-finite value from any input.  The sum probe is a fast pre-filter
    # (any NaN/Inf poisons the sum); isfinite confirms before raising so a
    # finite array whose sum overflows cannot trip a false fault.
    if check and not math.isfinite(out_data.sum()) and not np.isfinite(out_data).all():
        raise NumericFault(op)
    needs_grad = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
    out = Tensor._make(out_data, needs_grad)
    if needs_grad:
        _TAPES[-1].entries.append(TapeEntry(op, inputs, out, backward_fn))
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _broadcast_check(op: str, sa: tuple, sb: tuple):
    ok = (
        sa == sb
        or math.prod(sa) == 1
        or math.prod(sb) == 1
        or (len(sb) == 1 and len(sa) >= 1 and sa[-1] == sb[0])
        or (len(sa) == 1 and len(sb) >= 1 and sb[-1] == sa[0])
        or (len(sa) == len(sb) and all(a == b or a == 1 or b == 1 for a, b in zip(sa, sb)))
    )
    if not ok:
        raise ShapeError(f"{op}: shapes {sa} and {sb} are not broadcast-compatible")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, (gd, sd) in enumerate(zip(g.shape, shape)):
        if sd == 1 and gd != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        a = _as_tensor(a)
        return _from_op("add", a.data + b, (a,), lambda g: (g,))
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    if sa == sb:
        return _from_op("add", a.data + b.data, (a, b), lambda g: (g, g))
    _broadcast_check("add", sa, sb)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _from_op("add", out, (a, b), bw)


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        a = _as_tensor(a)
        return _from_op("sub", a.data - b, (a,), lambda g: (g,))
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    if sa == sb:
        return _from_op("sub", a.data - b.data, (a, b), lambda g: (g, -g))
    _broadcast_check("sub", sa, sb)
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _from_op("sub", out, (a, b), bw)


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        a = _as_tensor(a)
        return _from_op("mul", a.data * b, (a,), lambda g: (g * b,))
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    sa, sb = a.shape, b.shape
    if sa == sb:
        return _from_op("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))
    _broadcast_check("mul", sa, sb)

    def bw(g):
        return _unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)

    return _from_op("mul", ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        a = _as_tensor(a)
        inv = 1.0 / b
        return _from_op("div", a.data * inv, (a,), lambda g: (g * inv,))
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    sa, sb = a.shape, b.shape
    if sa != sb:
        _broadcast_check("div", sa, sb)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd

    def bw(g):
        return (_unbroadcast(g / bd, sa),
                _unbroadcast(-g * ad / (bd * bd), sb))

    return _from_op("div", out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    return _from_op("neg", -a.data, (a,), lambda g: (-g,), check=False)


def pow_const(a: Tensor, p) -> Tensor:
    a = _as_tensor(a)
    p = float(p)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data ** p
    ad = a.data

    def bw(g):
        return (g * p * ad ** (p - 1.0),)

    return _from_op("pow", out, (a,), bw)


def sqrt(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)

    def bw(g):
        # derivative at 0 taken as 0 so floored-denominator norms stay finite
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, 0.5 * g / safe, 0.0),)

    return _from_op("sqrt", out, (a,), bw)


def exp(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)

    def bw(g):
        return (g * out,)

    return _from_op("exp", out, (a,), bw)


def log(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    ad = a.data

    def bw(g):
        return (g / ad,)

    return _from_op("log", out, (a,), bw)


def maximum_const(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    out = np.maximum(a.data, c)
    mask = a.data > c

    def bw(g):
        return (g * mask,)

    return _from_op("maximum_const", out, (a,), bw, check=False)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def _sigmoid_values(x: np.ndarray) -> np.ndarray:
    # tanh form is overflow-free in both directions
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = _sigmoid_values(a.data)

    def bw(g):
        return (g * out * (1.0 - out),)

    return _from_op("sigmoid", out, (a,), bw)


def silu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    s = _sigmoid_values(a.data)
    out = a.data * s
    ad = a.data

    def bw(g):
        return (g * s * (1.0 + ad * (1.0 - s)),)

    return _from_op("silu", out, (a,), bw)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def _swap_last(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {ad.shape} @ {bd.shape}")
    if ad.ndim == 3 and bd.ndim == 3 and ad.shape[0] != bd.shape[0]:
        raise ShapeError(f"matmul batch dims differ: {ad.shape} @ {bd.shape}")
    out = ad @ bd

    def bw(g):
        ga = g @ _swap_last(bd)
        gb = _swap_last(ad) @ g
        if ga.ndim > ad.ndim:
            ga = ga.sum(axis=0)
        if gb.ndim > bd.ndim:
            gb = gb.sum(axis=0)
        return ga, gb

    return _from_op("matmul", out, (a, b), bw)


def transpose_last(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if a.ndim < 2:
        raise ShapeError("transpose_last needs rank >= 2")
    out = _swap_last(a.data)

    def bw(g):
        return (_swap_last(g),)

    return _from_op("transpose_last", out, (a,), bw, check=False)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _from_op("sum", out, (a,), bw)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    shape = a.shape
    n = a.data.size if axis is None else a.shape[axis]

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape) / n,)

    return _from_op("mean", out, (a,), bw)


def standardize(a: Tensor, eps: float = 1e-5) -> Tensor:
    """(x - mean) / max(std, eps) over the last axis, as one fused op.

    Population statistics; the floored denominator makes constant inputs map
    to zero and keeps the op exactly invariant to positive input scaling
    whenever the std clears the floor.
    """
    a = _as_tensor(a)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    sigma = np.sqrt((xc * xc).mean(axis=-1, keepdims=True))
    denom = np.maximum(sigma, eps)
    out = xc / denom
    active = sigma > eps
    n = x.shape[-1]

    def bw(g):
        g_mean = g.mean(axis=-1, keepdims=True)
        proj = (g * out).mean(axis=-1, keepdims=True)
        return ((g - g_mean - active * out * proj) / denom,)

    return _from_op("standardize", out, (a,), bw)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max-stabilized softmax along `axis`; rows are positive and sum to 1."""
    a = _as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _from_op("softmax", out, (a,), bw)


def log_sum_exp(a: Tensor, axis: int = -1) -> Tensor:
    """Stabilized log(sum(exp(a))) along `axis` (axis is removed)."""
    a = _as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.squeeze(m + np.log(s), axis=axis)
    soft = e / s

    def bw(g):
        return (np.expand_dims(g, axis) * soft,)

    return _from_op("log_sum_exp", out, (a,), bw)


# ---------------------------------------------------------------------------
# structure
# ---------------------------------------------------------------------------

def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of an empty sequence")
    ranks = {t.ndim for t in ts}
    if len(ranks) != 1:
        raise ShapeError(f"concat rank mismatch: {[t.shape for t in ts]}")
    ax = axis % ts[0].ndim
    ref = list(ts[0].shape)
    for t in ts[1:]:
        other = list(t.shape)
        if ref[:ax] + ref[ax + 1:] != other[:ax] + other[ax + 1:]:
            raise ShapeError(f"concat off-axis shape mismatch: {[t.shape for t in ts]}")
    out = np.concatenate([t.data for t in ts], axis=ax)
    sizes = [t.shape[ax] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=ax))

    return _from_op("concat", out, tuple(ts), bw, check=False)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("stack of an empty sequence")
    shapes = {t.shape for t in ts}
    if len(shapes) != 1:
        raise ShapeError(f"stack shape mismatch: {[t.shape for t in ts]}")
    if ts[0].ndim + 1 > 3:
        raise ShapeError("stack result would exceed rank 3")
    ax = axis % (ts[0].ndim + 1)
    out = np.stack([t.data for t in ts], axis=ax)

    def bw(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(ts)))

    return _from_op("stack", out, tuple(ts), bw, check=False)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    a = _as_tensor(a)
    ax = axis % a.ndim
    if start < 0 or start + length > a.shape[ax]:
        raise ShapeError(f"narrow [{start}:{start + length}] out of range "
                         f"for axis {ax} of {a.shape}")
    idx = [slice(None)] * a.ndim
    idx[ax] = slice(start, start + length)
    idx = tuple(idx)
    out = a.data[idx]
    shape = a.shape

    def bw(g):
        buf = np.zeros(shape, dtype=g.dtype)
        buf[idx] = g
        return (buf,)

    return _from_op("narrow", out, (a,), bw, check=False)


def reshape(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    if len(shape) > 3:
        raise ShapeError("reshape target exceeds rank 3")
    out = a.data.reshape(shape)
    orig = a.shape

    def bw(g):
        return (g.reshape(orig),)

    return _from_op("reshape", out, (a,), bw, check=False)


def take_rows(a: Tensor, indices) -> Tensor:
    """Gather rows along axis 0; backward scatter-adds into place."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("take_rows expects a 1-D index array")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(f"take_rows index out of range for {a.shape}")
    out = a.data[idx]
    shape = a.shape

    def bw(g):
        buf = np.zeros(shape, dtype=g.dtype)
        np.add.at(buf, idx, g)
        return (buf,)

    return _from_op("take_rows", out, (a,), bw, check=False)


# ---------------------------------------------------------------------------
# classification loss
# ---------------------------------------------------------------------------

def cross_entropy_logits(logits: Tensor, targets) -> Tensor:
    """Mean cross-entropy of softmax(logits) against targets.

    `targets` is either an integer class index array of shape (B,) or a
    constant soft-target distribution of shape (B, C).  1-D logits are
    treated as a single-row batch.
    """
    logits = _as_tensor(logits)
    x = logits.data
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] < 2:
        raise ShapeError(f"cross_entropy_logits expects (B, C>=2) logits, got {logits.shape}")
    B, C = x.shape
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=1, keepdims=True)
    logp = (x - m) - np.log(s)
    soft = e / s

    t = np.asarray(targets)
    if np.issubdtype(t.dtype, np.integer):
        t = t.reshape(-1)
        if t.shape[0] != B:
            raise ShapeError(f"target count {t.shape[0]} != batch {B}")
        if t.size and (t.min() < 0 or t.max() >= C):
            raise IndexError(f"class index out of range [0, {C})")
        out = -logp[np.arange(B), t].mean()
        grad_base = soft.copy()
        grad_base[np.arange(B), t] -= 1.0
    else:
        t = t.astype(x.dtype)
        if squeeze and t.ndim == 1:
            t = t[None, :]
        if t.shape != (B, C):
            raise ShapeError(f"soft targets {t.shape} do not match logits {(B, C)}")
        if np.any(t < -1e-9):
            raise ValueError("soft targets must be nonnegative")
        out = -(t * logp).sum(axis=1).mean()
        grad_base = soft - t
    grad_base /= B

    def bw(g):
        gx = g * grad_base
        return (gx[0] if squeeze else gx,)

    return _from_op("cross_entropy_logits", np.asarray(out), (logits,), bw)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def backward(loss: Tensor, tape: Tape | None = None):
    """Populate `.grad` of every requires_grad leaf reachable from `loss`.

    Walks the tape in reverse recording order, message-passing gradients
    through intermediate nodes; whatever remains unconsumed at the end
    belongs to leaves and is accumulated into their `.grad`.
    """
    tape = tape if tape is not None else active_tape()
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for entry in reversed(tape.entries):
        g = grads.pop(id(entry.output), None)
        holders.pop(id(entry.output), None)
        if g is None:
            continue
        in_grads = entry.backward_fn(g)
        for t, ig in zip(entry.inputs, in_grads):
            if ig is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + ig
            else:
                grads[key] = ig
                holders[key] = t
    for key, g in grads.items():
        t = holders[key]
        g = np.asarray(g, dtype=t.data.dtype).reshape(t.shape)
        t.grad = g.copy() if t.grad is None else t.grad + g


def zero_grad(tensors: Iterable[Tensor]):
    for t in tensors:
        t.grad = None
