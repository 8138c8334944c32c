"""Dense float64 tensors with a reverse-mode gradient tape.

Operations record themselves on the tape that is active in the current
thread, but only when at least one input was produced on that tape.  Anything
else is treated as a constant, which is how truncation boundaries are
expressed: wrap the incoming state with :class:`Tensor` and it carries no
history.

    with Tape() as tape:
        w = tape.watch(np.ones(3))
        loss = (w * w).sum()
    (grad,) = tape.gradient(loss, [w])
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.linalg

__all__ = [
    "Tensor",
    "Tape",
    "NonFiniteError",
    "ShapeError",
    "checked",
    "as_tensor",
    "constant",
    "matmul",
    "einsum",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "relu",
    "leaky_relu",
    "sigmoid",
    "tanh",
    "swish",
    "step",
    "exp",
    "log",
    "sqrt",
    "square",
    "sign",
    "abs",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "broadcast_to",
    "concat",
    "stack",
    "take",
    "conv1d_axis",
    "batch_norm",
    "reduce_stats",
    "solve_spd",
    "rms_normalize",
    "stacked_stats",
    "record",
]


class NonFiniteError(FloatingPointError):
    """Raised in checked mode when an operation produces NaN or Inf."""


class ShapeError(ValueError):
    pass


class _State(threading.local):
    def __init__(self):
        self.tape: Tape | None = None
        self.checked = True


_state = _State()


@contextmanager
def checked(enabled: bool = True):
    """Toggle the NaN/Inf guard for the current thread."""
    prev = _state.checked
    _state.checked = enabled
    try:
        yield
    finally:
        _state.checked = prev


class Tensor:
    __slots__ = ("data", "_tape", "_node")

    __array_priority__ = 100.0

    def __init__(self, data, _tape: "Tape | None" = None, _node: int = -1):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 4:
            raise ShapeError(f"rank {arr.ndim} exceeds the supported maximum of 4")
        self.data = arr
        self._tape = _tape
        self._node = _node

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def requires_grad(self) -> bool:
        return self._tape is not None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return self.data.shape[0]

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __rmatmul__ = lambda self, o: matmul(o, self)
    __neg__ = lambda self: neg(self)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    @property
    def T(self):
        return transpose(self)


VJP = Callable[[np.ndarray, tuple], tuple]


class Tape:
    """Append-only record of differentiable operations.

    Node ``i`` stores its parents and a vector-Jacobian closure.  Parents are
    always recorded before their children, so a reverse sweep over the node
    list is a valid topological order and touches every node once.
    """

    def __init__(self):
        self._parents: list[tuple] = []
        self._vjps: list[VJP | None] = []
        self._prev: list[Tape | None] = []

    def __len__(self):
        return len(self._vjps)

    def __enter__(self):
        self._prev.append(_state.tape)
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = self._prev.pop()
        return False

    def watch(self, value) -> Tensor:
        """Register ``value`` as a differentiable leaf."""
        data = value.data if isinstance(value, Tensor) else value
        t = Tensor(np.array(data, dtype=np.float64), self, len(self._vjps))
        self._parents.append(())
        self._vjps.append(None)
        return t

    def _record(self, data, parents, live, vjp) -> Tensor:
        idx = len(self._vjps)
        self._parents.append(tuple(p if ok else None for p, ok in zip(parents, live)))
        self._vjps.append(vjp)
        return Tensor(data, self, idx)

    def gradient(self, loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of scalar ``loss`` with respect to each tensor in ``wrt``.

        Tensors the loss does not depend on get zeros.
        """
        if loss.data.size != 1:
            raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
        out = [np.zeros_like(w.data) for w in wrt]
        if loss._tape is not self:
            return out
        grads: list[np.ndarray | None] = [None] * (loss._node + 1)
        grads[loss._node] = np.ones_like(loss.data)
        keep = {w._node for w in wrt if w._tape is self}
        for i in range(loss._node, -1, -1):
            g = grads[i]
            if g is None:
                continue
            vjp = self._vjps[i]
            if vjp is None:
                continue
            parents = self._parents[i]
            need = tuple(p is not None for p in parents)
            pgrads = vjp(g, need)
            for p, pg in zip(parents, pgrads):
                if p is None or pg is None:
                    continue
                j = p._node
                if grads[j] is None:
                    grads[j] = pg if pg.shape == p.data.shape else np.broadcast_to(pg, p.data.shape).copy()
                else:
                    grads[j] = grads[j] + pg
            if i not in keep:
                grads[i] = None
        for k, w in enumerate(wrt):
            if w._tape is self and w._node < len(grads) and grads[w._node] is not None:
                out[k] = grads[w._node]
        return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


constant = as_tensor


def _sum_all(data):
    return np.add.reduce(data, axis=None)


def _result(data: np.ndarray, parents: tuple, vjp: VJP) -> Tensor:
    if _state.checked and not np.isfinite(_sum_all(data)) and not np.isfinite(data).all():
        raise NonFiniteError("operation produced a non-finite value")
    tape = _state.tape
    if tape is not None:
        live = tuple(p._tape is tape for p in parents)
        if any(live):
            return tape._record(data, parents, live, vjp)
    return Tensor(data)


def record(data: np.ndarray, parents: Sequence, vjp: VJP) -> Tensor:
    """Public hook for fused operations defined outside this module.

    ``vjp(g, need)`` returns one gradient (or ``None``) per parent.
    """
    return _result(np.asarray(data, dtype=np.float64), tuple(as_tensor(p) for p in parents), vjp)


def _bcast_shape(a: tuple, b: tuple) -> tuple:
    if a == b:
        return a
    if len(a) == 0:
        return b
    if len(b) == 0:
        return a
    if len(a) != len(b):
        raise ShapeError(f"cannot broadcast {a} with {b}: ranks differ")
    out = []
    for x, y in zip(a, b):
        if x == y or y == 1:
            out.append(x)
        elif x == 1:
            out.append(y)
        else:
            raise ShapeError(f"cannot broadcast {a} with {b}")
    return tuple(out)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    axes = tuple(i for i, (s, gs) in enumerate(zip(shape, g.shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


# ---------------------------------------------------------------- binary ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def vjp(g, need):
        return (_unbroadcast(g, sa) if need[0] else None, _unbroadcast(g, sb) if need[1] else None)

    return _result(a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def vjp(g, need):
        return (_unbroadcast(g, sa) if need[0] else None, _unbroadcast(-g, sb) if need[1] else None)

    return _result(a.data - b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data

    def vjp(g, need):
        return (
            _unbroadcast(g * bd, ad.shape) if need[0] else None,
            _unbroadcast(g * ad, bd.shape) if need[1] else None,
        )

    return _result(ad * bd, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    if _state.checked and np.any(bd == 0.0):
        raise ZeroDivisionError("division by exact zero")
    out = ad / bd

    def vjp(g, need):
        return (
            _unbroadcast(g / bd, ad.shape) if need[0] else None,
            _unbroadcast(-g * out / bd, bd.shape) if need[1] else None,
        )

    return _result(out, (a, b), vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g, need: (-g,))


def matmul(a, b) -> Tensor:
    """Matrix product of two rank-2 tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects matrices, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g, need):
        return (g @ bd.T if need[0] else None, ad.T @ g if need[1] else None)

    return _result(ad @ bd, (a, b), vjp)


def einsum(spec: str, a, b) -> Tensor:
    """Two-operand einsum without repeated or operand-private indices."""
    a, b = as_tensor(a), as_tensor(b)
    ins, out_s = spec.replace(" ", "").split("->")
    sa, sb = ins.split(",")
    for s, other in ((sa, sb), (sb, sa)):
        if len(set(s)) != len(s):
            raise ShapeError(f"repeated index in {spec!r}")
        for c in s:
            if c not in other and c not in out_s:
                raise ShapeError(f"index {c!r} in {spec!r} is summed within one operand")
    ad, bd = a.data, b.data
    fwd = _einsum2(sa, sb, out_s, ad, bd)

    def vjp(g, need):
        ga = _einsum2(out_s, sb, sa, g, bd) if need[0] else None
        gb = _einsum2(out_s, sa, sb, g, ad) if need[1] else None
        return ga, gb

    return _result(fwd, (a, b), vjp)


def _einsum2(sa: str, sb: str, so: str, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Batched-matmul evaluation of a two-operand contraction."""
    batch = [c for c in sa if c in sb and c in so]
    contr = [c for c in sa if c in sb and c not in so]
    free_a = [c for c in sa if c not in sb]
    free_b = [c for c in sb if c not in sa]
    dims = dict(zip(sa, a.shape))
    dims.update(zip(sb, b.shape))
    size = lambda cs: math.prod(dims[c] for c in cs)
    at = np.transpose(a, [sa.index(c) for c in batch + free_a + contr])
    bt = np.transpose(b, [sb.index(c) for c in batch + contr + free_b])
    nb = size(batch)
    prod = np.matmul(at.reshape(nb, size(free_a), size(contr)), bt.reshape(nb, size(contr), size(free_b)))
    order = batch + free_a + free_b
    res = prod.reshape([dims[c] for c in order])
    perm = [order.index(c) for c in so]
    if perm == sorted(perm):
        return res
    return np.ascontiguousarray(np.transpose(res, perm))


# ----------------------------------------------------------------- unary ops


def _unary(a, value: np.ndarray, dfdx: Callable[[], np.ndarray]) -> Tensor:
    return _result(value, (a,), lambda g, need: (g * dfdx(),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _unary(a, np.where(mask, a.data, 0.0), lambda: mask)


def leaky_relu(a, slope: float = 0.01) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _unary(a, np.where(mask, a.data, slope * a.data), lambda: np.where(mask, 1.0, slope))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _unary(a, s, lambda: s * (1.0 - s))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)
    return _unary(a, t, lambda: 1.0 - t * t)


def swish(a) -> Tensor:
    a = as_tensor(a)
    s = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _unary(a, a.data * s, lambda: s + a.data * s * (1.0 - s))


def step(a) -> Tensor:
    a = as_tensor(a)
    return _unary(a, (a.data > 0).astype(np.float64), lambda: 0.0)


def exp(a) -> Tensor:
    a = as_tensor(a)
    e = np.exp(a.data)
    return _unary(a, e, lambda: e)


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        v = np.log(a.data)
    return _unary(a, v, lambda: 1.0 / a.data)


def sqrt(a) -> Tensor:
    """Square root; the derivative at exactly zero is taken as zero."""
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        r = np.sqrt(a.data)

    def d():
        safe = np.where(r > 0, r, 1.0)
        return np.where(r > 0, 0.5 / safe, 0.0)

    return _unary(a, r, d)


def square(a) -> Tensor:
    a = as_tensor(a)
    return _unary(a, a.data * a.data, lambda: 2.0 * a.data)


def sign(a) -> Tensor:
    a = as_tensor(a)
    return _unary(a, np.sign(a.data), lambda: 0.0)


def abs(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    return _unary(a, np.abs(a.data), lambda: np.sign(a.data))


# ----------------------------------------------------------- shape / reduce


def _norm_axes(axis, ndim) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape
    kshape = tuple(1 if i in axes else s for i, s in enumerate(shape))

    def vjp(g, need):
        return (np.broadcast_to(g.reshape(kshape), shape),)

    return _result(a.data.sum(axis=axes, keepdims=keepdims), (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    n = 1
    for ax in axes:
        n *= a.shape[ax]
    if n == 0:
        raise ShapeError("mean over zero elements")
    shape = a.shape
    kshape = tuple(1 if i in axes else s for i, s in enumerate(shape))
    inv_n = 1.0 / n

    def vjp(g, need):
        return (np.broadcast_to(g.reshape(kshape) * inv_n, shape),)

    return _result(a.data.sum(axis=axes, keepdims=keepdims) * inv_n, (a,), vjp)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g, need: (g.reshape(src),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g, need: (np.transpose(g, inv),))


def broadcast_to(a, shape) -> Tensor:
    """Explicit broadcast; ``a`` must already have the target rank (or be 0-d)."""
    a = as_tensor(a)
    shape = tuple(shape)
    if a.ndim and a.ndim != len(shape):
        raise ShapeError(f"broadcast_to needs equal rank: {a.shape} -> {shape}")
    src = a.shape
    return _result(np.broadcast_to(a.data, shape).copy(), (a,), lambda g, need: (_unbroadcast(g, src),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ax = axis % ts[0].ndim
    sizes = [t.shape[ax] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g, need):
        return tuple(np.split(g, splits, axis=ax))

    return _result(np.concatenate([t.data for t in ts], axis=ax), tuple(ts), vjp)


def stack(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ax = axis % (ts[0].ndim + 1)
    n = len(ts)

    def vjp(g, need):
        return tuple(np.take(g, i, axis=ax) for i in range(n))

    return _result(np.stack([t.data for t in ts], axis=ax), tuple(ts), vjp)


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather entries along one axis (used for feature permutations)."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    ax = axis % a.ndim
    shape = a.shape

    def vjp(g, need):
        out = np.zeros(shape)
        np.add.at(out, (slice(None),) * ax + (idx,), g)
        return (out,)

    return _result(np.take(a.data, idx, axis=ax), (a,), vjp)


# ------------------------------------------------------------ composite ops


def conv1d_axis(x, kernel, axis: int) -> Tensor:
    """Stride-1, zero-padded "same" 1-D convolution along axis 0 or 1.

    ``x`` is ``[A0, A1, C_in]`` and ``kernel`` is ``[K, C_in, C_out]`` with odd
    ``K``.  Cross-correlation convention: tap ``k`` reads offset ``k - K//2``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 3 or kernel.ndim != 3:
        raise ShapeError(f"conv1d_axis expects rank-3 input and kernel, got {x.shape}, {kernel.shape}")
    if axis not in (0, 1):
        raise ShapeError(f"conv axis must be 0 or 1, got {axis}")
    k_size, c_in, c_out = kernel.shape
    if k_size % 2 == 0:
        raise ShapeError(f"kernel size must be odd, got {k_size}")
    if x.shape[2] != c_in:
        raise ShapeError(f"input has {x.shape[2]} channels, kernel expects {c_in}")
    xd, kd = x.data, kernel.data
    n = xd.shape[axis]
    half = k_size // 2
    pad = [(0, 0)] * 3
    pad[axis] = (half, half)
    xp = np.pad(xd, pad)
    # cols[..., k, c] = xp shifted by k along `axis`
    if axis == 0:
        cols = np.stack([xp[k : k + n] for k in range(k_size)], axis=2)
    else:
        cols = np.stack([xp[:, k : k + n] for k in range(k_size)], axis=2)
    a0, a1 = xd.shape[0], xd.shape[1]
    cols2 = cols.reshape(a0 * a1, k_size * c_in)
    k2 = kd.reshape(k_size * c_in, c_out)
    out = (cols2 @ k2).reshape(a0, a1, c_out)

    def vjp(g, need):
        g2 = g.reshape(a0 * a1, c_out)
        gk = (cols2.T @ g2).reshape(kd.shape) if need[1] else None
        gx = None
        if need[0]:
            gcols = (g2 @ k2.T).reshape(a0, a1, k_size, c_in)
            gxp = np.zeros(xp.shape)
            for k in range(k_size):
                if axis == 0:
                    gxp[k : k + n] += gcols[:, :, k]
                else:
                    gxp[:, k : k + n] += gcols[:, :, k]
            gx = gxp[half : half + n] if axis == 0 else gxp[:, half : half + n]
        return gx, gk

    return _result(out, (x, kernel), vjp)


def batch_norm(x, axes, scale=None, offset=None, eps: float = 1e-5, relu: bool = False) -> Tensor:
    """Normalize over ``axes`` using the statistics of ``x`` itself.

    ``relu=True`` fuses a rectifier onto the output.

    ``scale``/``offset`` are indexed by the remaining (channel) axes; they may
    be given with those axes only, or already in keep-dims form.
    """
    x = as_tensor(x)
    axes = _norm_axes(axes, x.ndim)
    if not axes:
        raise ShapeError("batch_norm needs at least one reduction axis")
    n = 1
    for ax in axes:
        n *= x.shape[ax]
    if n == 0:
        raise ShapeError("batch_norm over zero elements")
    kshape = tuple(1 if i in axes else s for i, s in enumerate(x.shape))
    xd = x.data
    mu = xd.mean(axis=axes, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    sc = None if scale is None else as_tensor(scale)
    of = None if offset is None else as_tensor(offset)
    y = xhat if sc is None else xhat * sc.data.reshape(kshape)
    if of is not None:
        y = y + of.data.reshape(kshape)
    mask = None
    if relu:
        mask = y > 0
        y = np.where(mask, y, 0.0)

    def vjp(g, need):
        if mask is not None:
            g = g * mask
        gs = g if sc is None else g * sc.data.reshape(kshape)
        gx = inv * (gs - gs.mean(axis=axes, keepdims=True) - xhat * (gs * xhat).mean(axis=axes, keepdims=True))
        out = [gx]
        if sc is not None:
            out.append((g * xhat).sum(axis=axes, keepdims=True).reshape(sc.shape) if need[1] else None)
        if of is not None:
            out.append(g.sum(axis=axes, keepdims=True).reshape(of.shape) if need[-1] else None)
        return tuple(out)

    parents = (x,) + tuple(t for t in (sc, of) if t is not None)
    return _result(y, parents, vjp)


def reduce_stats(x, axis: int) -> dict:
    """l1 mean, rms, mean and population std along ``axis``."""
    x = as_tensor(x)
    if x.shape[axis] < 1:
        raise ShapeError("reduce_stats over an empty axis")
    mu = mean(x, axis)
    centered = x - mean(x, axis, keepdims=True)
    return {
        "l1_mean": mean(abs(x), axis),
        "rms": sqrt(mean(square(x), axis)),
        "mean": mu,
        "std": sqrt(mean(square(centered), axis)),
    }


def solve_spd(a, b) -> Tensor:
    """Solve ``a @ X = b`` for symmetric positive-definite ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or b.ndim != 2 or b.shape[0] != a.shape[0]:
        raise ShapeError(f"solve_spd shapes incompatible: {a.shape}, {b.shape}")
    try:
        factor = scipy.linalg.cho_factor(a.data, lower=True, check_finite=False)
    except np.linalg.LinAlgError as err:
        raise np.linalg.LinAlgError(f"matrix is not positive definite: {err}") from err
    x = scipy.linalg.cho_solve(factor, b.data, check_finite=False)

    def vjp(g, need):
        gb = scipy.linalg.cho_solve(factor, g, check_finite=False)
        return (-gb @ x.T if need[0] else None, gb if need[1] else None)

    return _result(x, (a, b), vjp)


def rms_normalize(x, axis, eps: float) -> Tensor:
    """``x / sqrt(mean(x**2, axis) + eps)``; ``axis=None`` reduces over everything."""
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    xd = x.data
    r = np.sqrt((xd * xd).mean(axis=axes, keepdims=True) + eps)
    if _state.checked and np.any(r == 0.0):
        raise ZeroDivisionError("division by exact zero")
    y = xd / r

    def vjp(g, need):
        return (g / r - y * ((g * y).mean(axis=axes, keepdims=True) / r),)

    return _result(y, (x,), vjp)


def stacked_stats(x, axis: int) -> Tensor:
    """The four :func:`reduce_stats` values stacked on a new last axis, as one tape node."""
    x = as_tensor(x)
    ax = axis % x.ndim
    n = x.shape[ax]
    if n < 1:
        raise ShapeError("stacked_stats over an empty axis")
    xd = x.data
    mu = xd.mean(axis=ax, keepdims=True)
    xc = xd - mu
    rms = np.sqrt((xd * xd).mean(axis=ax, keepdims=True))
    std = np.sqrt((xc * xc).mean(axis=ax, keepdims=True))
    out = np.stack([np.abs(xd).mean(axis=ax), rms.squeeze(ax), mu.squeeze(ax), std.squeeze(ax)], axis=-1)
    safe_rms = np.where(rms > 0, rms, 1.0)
    safe_std = np.where(std > 0, std, 1.0)

    def vjp(g, need):
        g0, g1, g2, g3 = (np.expand_dims(g[..., i], ax) for i in range(4))
        gx = g0 * np.sign(xd) + g2
        gx = gx + np.where(rms > 0, g1 / safe_rms, 0.0) * xd + np.where(std > 0, g3 / safe_std, 0.0) * xc
        return (gx / n,)

    return _result(out, (x,), vjp)


def global_norm(arrays: Iterable[np.ndarray]) -> float:
    return float(np.sqrt(np.sum([np.sum(np.square(a)) for a in arrays])))
