"""Dense-tensor numerics with reverse-mode differentiation on a tape.

Design notes, kept deliberately small:

* A ``Tensor`` wraps a float32 or float64 numpy array. Precision is
  uniform inside one computation graph; mixing dtypes in an op is an
  error (finite-difference verification runs the whole graph at 64-bit).
* Ops execute eagerly. When a :class:`Tape` is active and any operand
  requires gradients, the op is recorded; :func:`backward` replays the
  records in reverse and returns a gradient for every requires-grad
  *leaf* (a tensor that was not produced by a recorded op), keyed by
  ``Tensor.uid``. A tape supports exactly one backward pass.
* Elementwise ops follow numpy's trailing-axis broadcast alignment
  (equal shapes, scalar expansion, suffix alignment, size-1 axes).
  ``matmul`` is strict: both operands 2D, or equal-rank stacks with
  identical leading dimensions. All other coercion is explicit via
  reshape/transpose/concat/gather.
* ``matmul`` reports its multiply-add count to an optional
  :class:`FlopMeter`; that is the instrumentation the FLOP profiler
  cross-checks its closed-form ledger against.
"""

import itertools
from contextlib import contextmanager

import numpy as np

from . import kernels as K


class EngineError(Exception):
    """Base error for tensor-engine contract violations."""


class ShapeError(EngineError):
    """Operand shapes do not conform to the primitive's rule."""


class TapeError(EngineError):
    """Backward called off-tape or on a consumed tape."""


_uid = itertools.count()
_TAPES = []


class Tape:
    """Ordered record of primitive ops; consumed by one backward pass."""

    def __init__(self):
        self.nodes = []
        self.consumed = False

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False


def current_tape():
    return _TAPES[-1] if _TAPES else None


class FlopMeter:
    """Counts floating-point ops (multiply-add = 2) done by matmul."""

    def __init__(self):
        self.flops = 0


_METER = None


@contextmanager
def meter_flops():
    """Context manager yielding a FlopMeter fed by every matmul."""
    global _METER
    prev = _METER
    meter = FlopMeter()
    _METER = meter
    try:
        yield meter
    finally:
        _METER = prev


class Tensor:
    """Dense real array plus autodiff metadata."""

    __slots__ = ("data", "requires_grad", "uid", "_tape")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if arr.dtype not in (np.float32, np.float64):
            raise EngineError(f"Tensor: unsupported dtype {arr.dtype}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.uid = next(_uid)
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._tape is None

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # numpy-style conveniences; all route through the module primitives
    def __add__(self, other):
        return add(self, _coerce(other, self))

    def __radd__(self, other):
        return add(_coerce(other, self), self)

    def __sub__(self, other):
        return sub(self, _coerce(other, self))

    def __rsub__(self, other):
        return sub(_coerce(other, self), self)

    def __mul__(self, other):
        return mul(self, _coerce(other, self))

    def __rmul__(self, other):
        return mul(_coerce(other, self), self)

    def __truediv__(self, other):
        return div(self, _coerce(other, self))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)


def _coerce(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _check_dtype(op, *ts):
    d = ts[0].data.dtype
    for t in ts[1:]:
        if t.data.dtype != d:
            raise EngineError(
                f"{op}: mixed precision {d} vs {t.data.dtype}; one graph, one dtype"
            )


def _record(out_data, parents, bwd):
    out = Tensor(out_data)
    tape = current_tape()
    if tape is not None and not tape.consumed and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._tape = tape
        tape.nodes.append((out, parents, bwd))
    return out


def backward(loss):
    """Run reverse-mode accumulation from a scalar loss.

    Returns a dict mapping ``uid`` of every requires-grad leaf reached
    by the sweep to its gradient Tensor. The tape is consumed.
    """
    tape = loss._tape
    if tape is None:
        raise TapeError("backward: loss is not recorded on a live tape")
    if tape.consumed:
        raise TapeError("backward: tape already consumed by a previous backward")
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape.consumed = True

    grads = {loss.uid: np.ones_like(loss.data)}
    leaves = {}
    for out, parents, bwd in reversed(tape.nodes):
        g = grads.pop(out.uid, None)
        if g is None:
            continue
        for p, pg in zip(parents, bwd(g)):
            if pg is None or not p.requires_grad:
                continue
            if p.uid in grads:
                grads[p.uid] = grads[p.uid] + pg  # out-of-place: pg may alias g
            else:
                grads[p.uid] = pg
            if p.is_leaf:
                leaves[p.uid] = p
    return {uid: Tensor(grads[uid]) for uid, t in leaves.items()}


# ---------------------------------------------------------------------------
# elementwise / broadcasting


def _broadcastable(a, b):
    for da, db in zip(a[::-1], b[::-1]):
        if da != db and da != 1 and db != 1:
            return False
    return True


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _ew(op, a, b, fwd, bwd_a, bwd_b):
    _check_dtype(op, a, b)
    if not _broadcastable(a.shape, b.shape):
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not align")
    out = fwd(a.data, b.data)

    def bwd(g):
        return (
            _unbroadcast(bwd_a(g), a.shape),
            _unbroadcast(bwd_b(g), b.shape),
        )

    return _record(out, (a, b), bwd)


def add(a, b):
    return _ew("add", a, b, lambda x, y: x + y, lambda g: g, lambda g: g)


def sub(a, b):
    return _ew("sub", a, b, lambda x, y: x - y, lambda g: g, lambda g: -g)


def mul(a, b):
    return _ew("mul", a, b, lambda x, y: x * y,
               lambda g: g * b.data, lambda g: g * a.data)


def div(a, b):
    return _ew("div", a, b, lambda x, y: x / y,
               lambda g: g / b.data,
               lambda g: -g * a.data / (b.data * b.data))


def neg(a):
    return _record(-a.data, (a,), lambda g: (-g,))


# ---------------------------------------------------------------------------
# matmul


def matmul(a, b):
    _check_dtype("matmul", a, b)
    sa, sb = a.shape, b.shape
    if a.ndim < 2 or b.ndim < 2 or a.ndim != b.ndim or sa[:-2] != sb[:-2] or sa[-1] != sb[-2]:
        raise ShapeError(f"matmul: shapes {sa} and {sb} do not conform")
    out = a.data @ b.data
    if _METER is not None:
        batch = int(np.prod(sa[:-2], dtype=np.int64)) if a.ndim > 2 else 1
        _METER.flops += 2 * batch * sa[-2] * sa[-1] * sb[-1]

    def bwd(g):
        return (
            g @ np.swapaxes(b.data, -1, -2),
            np.swapaxes(a.data, -1, -2) @ g,
        )

    return _record(out, (a, b), bwd)


# ---------------------------------------------------------------------------
# activations


def sigmoid(a):
    y = K.sigmoid_fwd(np.ascontiguousarray(a.data))
    # floor clamps float underflow so downstream (0, 1] contracts hold
    np.maximum(y, np.finfo(y.dtype).tiny, out=y)
    return _record(y, (a,), lambda g: (K.sigmoid_bwd(y, np.ascontiguousarray(g)),))


def gelu(a):
    xc = np.ascontiguousarray(a.data)
    y = K.gelu_fwd(xc)
    return _record(y, (a,), lambda g: (K.gelu_bwd(xc, np.ascontiguousarray(g)),))


def softmax(a, axis=-1, mask=None):
    """Softmax along ``axis``; optional boolean keep-mask over that axis.

    Masked entries get weight exactly 0 and the rest renormalize, which
    is what makes masked attention match physical token removal.
    """
    nd = a.ndim
    ax = axis % nd
    x = a.data
    if ax != nd - 1:
        x = np.moveaxis(x, ax, -1)
    lead = x.shape[:-1]
    cols = x.shape[-1]
    x2 = np.ascontiguousarray(x.reshape(-1, cols))
    if mask is None:
        y2 = K.softmax_fwd(x2)
    else:
        m = np.asarray(mask, dtype=bool)
        if not _broadcastable(a.shape, m.shape):
            raise ShapeError(f"softmax: mask shape {m.shape} does not align with {a.shape}")
        m = np.broadcast_to(m, a.shape)
        if ax != nd - 1:
            m = np.moveaxis(m, ax, -1)
        m2 = np.ascontiguousarray(m.reshape(-1, cols))
        y2 = K.softmax_masked_fwd(x2, m2)
    out = y2.reshape(lead + (cols,))
    if ax != nd - 1:
        out = np.moveaxis(out, -1, ax)

    def bwd(g):
        gm = np.moveaxis(g, ax, -1) if ax != nd - 1 else g
        g2 = np.ascontiguousarray(gm.reshape(-1, cols))
        gx2 = K.softmax_bwd(y2, g2)
        gx = gx2.reshape(lead + (cols,))
        if ax != nd - 1:
            gx = np.moveaxis(gx, -1, ax)
        return (gx,)

    return _record(out, (a,), bwd)


def layernorm(a, gain, bias, eps=1e-5):
    _check_dtype("layernorm", a, gain, bias)
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layernorm: gain/bias {gain.shape}/{bias.shape} must be ({d},) for input {a.shape}"
        )
    lead = a.shape[:-1]
    x2 = np.ascontiguousarray(a.data.reshape(-1, d))
    y2, mu, rstd = K.layernorm_fwd(x2, gain.data, bias.data, a.dtype.type(eps))

    def bwd(g):
        g2 = np.ascontiguousarray(g.reshape(-1, d))
        gx2, dgain, dbias = K.layernorm_bwd(x2, gain.data, mu, rstd, g2)
        return gx2.reshape(a.shape), dgain, dbias

    return _record(y2.reshape(lead + (d,)), (a, gain, bias), bwd)


# ---------------------------------------------------------------------------
# losses


def cross_entropy(logits, targets):
    """Mean cross-entropy of (N, C) logits against integer class targets."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be (N, C), got {logits.shape}")
    t = np.asarray(targets)
    n, c = logits.shape
    if t.shape != (n,):
        raise ShapeError(f"cross_entropy: targets shape {t.shape} != ({n},)")
    if not np.issubdtype(t.dtype, np.integer):
        raise EngineError("cross_entropy: targets must be integers")
    if t.min() < 0 or t.max() >= c:
        raise EngineError(f"cross_entropy: target out of range [0, {c})")
    x = logits.data
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    z = e.sum(axis=1, keepdims=True)
    logp = (x - m) - np.log(z)
    out = np.asarray(-logp[np.arange(n), t].mean(), dtype=x.dtype)

    def bwd(g):
        gx = e / z
        gx[np.arange(n), t] -= 1.0
        return (gx * (g / n),)

    return _record(out, (logits,), bwd)


# ---------------------------------------------------------------------------
# structure


def gather(a, idx, axis=0):
    """Select rows by index along an axis; dropped rows get zero gradient."""
    ids = np.asarray(idx)
    if ids.ndim != 1 or not np.issubdtype(ids.dtype, np.integer):
        raise EngineError("gather: idx must be a 1-D integer array")
    ax = axis % a.ndim
    if ids.size and (ids.min() < 0 or ids.max() >= a.shape[ax]):
        raise ShapeError(f"gather: index out of range for axis {ax} of {a.shape}")
    out = np.take(a.data, ids, axis=ax)

    def bwd(g):
        z = np.zeros(a.shape, dtype=a.dtype)
        np.add.at(np.moveaxis(z, ax, 0), ids, np.moveaxis(g, ax, 0))
        return (z,)

    return _record(out, (a,), bwd)


def concat(parts, axis=0):
    parts = list(parts)
    if not parts:
        raise ShapeError("concat: need at least one tensor")
    _check_dtype("concat", *parts)
    ax = axis % parts[0].ndim
    out = np.concatenate([p.data for p in parts], axis=ax)
    sizes = [p.shape[ax] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        gm = np.moveaxis(g, ax, 0)
        return tuple(
            np.moveaxis(gm[offsets[i]:offsets[i + 1]], 0, ax) for i in range(len(parts))
        )

    return _record(out, tuple(parts), bwd)


def transpose(a, axes=None):
    perm = tuple(range(a.ndim))[::-1] if axes is None else tuple(ax % a.ndim for ax in axes)
    if sorted(perm) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} is not a permutation for {a.shape}")
    inv = tuple(np.argsort(perm))
    return _record(a.data.transpose(perm), (a,), lambda g: (g.transpose(inv),))


def reshape(a, shape):
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def reduce_sum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _record(np.asarray(out, dtype=a.dtype), (a,), bwd)


def reduce_mean(a, axis=None, keepdims=False):
    n = a.size if axis is None else a.shape[axis % a.ndim]
    s = reduce_sum(a, axis=axis, keepdims=keepdims)
    return mul(s, _coerce(1.0 / n, s))


def zeros(shape, dtype=np.float32):
    return Tensor(np.zeros(shape, dtype=dtype))
