"""N-dimensional tensors with reverse-mode automatic differentiation.

Forward ops compute on numpy arrays. Whenever an op output requires
gradients, the op appends (output, backward_closure) to a thread-local
tape. Because an operand always exists before the op that consumes it,
execution order is a valid topological order, so ``backward`` just walks
the tape once in reverse and then clears it.

Storage is float32 by default; wrap oracle checks in ``precision("float64")``
for tighter tolerances. A tape belongs to one thread; parallelism across
independent tapes is fine, sharing one is not.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError

_FLOAT_DTYPES = (np.float32, np.float64)
_default_dtype = np.float32

_state = threading.local()


def default_dtype():
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dt = np.dtype(dtype).type
    if dt not in _FLOAT_DTYPES:
        raise ContractError(f"default dtype must be float32 or float64, got {np.dtype(dtype)}")
    _default_dtype = dt


@contextmanager
def precision(dtype):
    """Temporarily switch the default storage dtype ("float32"/"float64")."""
    old = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


class Tape:
    """Ordered record of executed ops for one thread of execution."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes: list[tuple["Tensor", Callable[[np.ndarray], None]]] = []


def tape() -> Tape:
    t = getattr(_state, "tape", None)
    if t is None:
        t = _state.tape = Tape()
    return t


def reset_tape() -> None:
    tape().nodes.clear()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording (inference / evaluation paths)."""
    old = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = old


class Tensor:
    """A dense n-dimensional array plus an optional gradient accumulator.

    ``data`` is row-major; ``grad``, when present, always has the same
    shape. ``requires_grad`` marks leaves the optimizer owns and
    propagates through ops so intermediates participate in backward.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        keep = isinstance(data, np.ndarray) and data.dtype.type in _FLOAT_DTYPES
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not keep:
            # lists / scalars / int arrays take the session default dtype;
            # float ndarrays keep theirs so float64 mode survives op chains
            arr = arr.astype(_default_dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

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

    def __repr__(self) -> str:
        req = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{req})"

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False, dtype=self.data.dtype)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_coerce_like(other, self), -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("tensor/tensor division is not supported; divide by a scalar")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)


def _coerce_like(x, ref: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=ref.data.dtype))


def _record(out: Tensor, backward: Callable[[np.ndarray], None]) -> None:
    if out.requires_grad and _grad_enabled():
        tape().nodes.append((out, backward))


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ts) in enumerate(zip(g.shape, shape)) if ts == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(loss: Tensor) -> None:
    """Assign d(loss)/d(t) to ``t.grad`` for every tensor on the tape.

    ``loss`` must be a scalar (one element). Visits each recorded node
    exactly once, newest first, then clears the tape.
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {getattr(loss, 'shape', None)}")
    nodes = tape().nodes
    if not nodes:
        raise ContractError("backward called on an empty tape")
    loss.grad = np.ones_like(loss.data)
    for out, bw in reversed(nodes):
        if out.grad is not None:
            bw(out.grad)
    nodes.clear()


# ---------------------------------------------------------------------------
# elementwise / broadcast ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _coerce_like(b, a)
    try:
        out_data = a.data + b.data
    except ValueError:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None
    out = Tensor(out_data, requires_grad=a.requires_grad or b.requires_grad, dtype=out_data.dtype)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    _record(out, bw)
    return out


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; ``b`` may be a scalar or a broadcastable tensor."""
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _coerce_like(b, a)
    try:
        out_data = a.data * b.data
    except ValueError:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None
    out = Tensor(out_data, requires_grad=a.requires_grad or b.requires_grad, dtype=out_data.dtype)

    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    _record(out, bw)
    return out


def elu(x: Tensor) -> Tensor:
    """Exponential linear unit, alpha = 1: x for x > 0, exp(x) - 1 otherwise."""
    xd = x.data
    pos = xd > 0
    out_data = xd.copy()
    out_data[~pos] = np.expm1(xd[~pos])
    out = Tensor(out_data, requires_grad=x.requires_grad, dtype=xd.dtype)

    def bw(g):
        # d/dx = 1 for x > 0, exp(x) = elu(x) + 1 otherwise
        _accum(x, g * np.where(pos, np.asarray(1.0, dtype=xd.dtype), out_data + 1))

    _record(out, bw)
    return out


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    out_data = np.empty_like(xd)
    pos = xd >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out_data[~pos] = ex / (1.0 + ex)
    out = Tensor(out_data, requires_grad=x.requires_grad, dtype=xd.dtype)

    def bw(g):
        _accum(x, g * out_data * (1.0 - out_data))

    _record(out, bw)
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Normalized exponentials along ``axis``, computed with max-subtraction."""
    xd = x.data
    if not -xd.ndim <= axis < xd.ndim:
        raise DimensionError(f"softmax: axis {axis} invalid for shape {x.shape}")
    shifted = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(out_data, requires_grad=x.requires_grad, dtype=xd.dtype)

    def bw(g):
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        _accum(x, (g - inner) * out_data)

    _record(out, bw)
    return out


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def _ordered_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product accumulated over the inner axis in ascending order.

    BLAS reorders the contraction, so its float64 results differ from a
    naive triple loop in the last few ulps. Summing the inner axis
    sequentially reproduces the naive order exactly, which the oracle
    tests compare against bit for bit.
    """
    k = a.shape[-1]
    shape = np.broadcast_shapes(a.shape[:-2], b.shape[:-2]) + (a.shape[-2], b.shape[-1])
    out = np.zeros(shape, dtype=np.result_type(a, b))
    for i in range(k):
        out += a[..., :, i:i + 1] * b[..., i:i + 1, :]
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product [.., m, k] x [.., k, n] -> [.., m, n]."""
    if not isinstance(a, Tensor) or not isinstance(b, Tensor):
        raise ContractError("matmul operands must be tensors")
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents disagree: {a.shape} x {b.shape}")
    try:
        if a.data.dtype == np.float64 or b.data.dtype == np.float64:
            out_data = _ordered_matmul(a.data, b.data)
        else:
            out_data = a.data @ b.data
    except ValueError:
        raise DimensionError(f"matmul batch extents do not broadcast: {a.shape} x {b.shape}") from None
    out = Tensor(out_data, requires_grad=a.requires_grad or b.requires_grad, dtype=out_data.dtype)

    def bw(g):
        _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    _record(out, bw)
    return out


def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Affine map x @ W + b for x of shape [.., k]."""
    k, n = weights.shape if weights.ndim == 2 else (None, None)
    if k is None or x.shape[-1] != k:
        raise DimensionError(f"dense: input {x.shape} incompatible with weights {weights.shape}")
    if bias.shape != (n,):
        raise DimensionError(f"dense: bias {bias.shape} must be ({n},)")
    if x.ndim == 1:
        return reshape(add(matmul(reshape(x, (1, k)), weights), bias), (n,))
    return add(matmul(x, weights), bias)


# ---------------------------------------------------------------------------
# convolution / pooling
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation (no kernel flip).

    x: [C, H, W] or [B, C, H, W]; kernels: [C_out, C_in, kh, kw].
    Output spatial extent is floor((H + 2 pad - kh) / stride) + 1.
    Implemented as an im2col matrix product; the column matrix is kept
    for the backward pass.
    """
    if stride < 1:
        raise ContractError(f"conv2d: stride must be >= 1, got {stride}")
    if padding < 0:
        raise ContractError(f"conv2d: padding must be >= 0, got {padding}")
    if kernels.ndim != 4:
        raise DimensionError(f"conv2d: kernels must be 4-d, got {kernels.shape}")
    squeeze = x.ndim == 3
    if x.ndim not in (3, 4):
        raise DimensionError(f"conv2d: input must be [C,H,W] or [B,C,H,W], got {x.shape}")
    xb = x.data[None] if squeeze else x.data
    batch, cin, h, w = xb.shape
    cout, cin_k, kh, kw = kernels.shape
    if cin_k != cin:
        raise DimensionError(f"conv2d: input channels {cin} != kernel channels {cin_k}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xp = np.pad(xb, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xb
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # [B, C, ho, wo, kh, kw] -> [B, C*kh*kw, ho*wo]
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(batch, cin * kh * kw, ho * wo)
    w2 = kernels.data.reshape(cout, cin * kh * kw)
    if cols.dtype == np.float64 or w2.dtype == np.float64:
        # the cols axis is (channel, kh, kw) row-major, same order as a
        # naive six-loop reference, so this matches it bit for bit
        out_data = _ordered_matmul(w2[None], cols).reshape(batch, cout, ho, wo)
    else:
        out_data = (w2 @ cols).reshape(batch, cout, ho, wo)
    if squeeze:
        out_data = out_data[0]
    out = Tensor(out_data, requires_grad=x.requires_grad or kernels.requires_grad, dtype=out_data.dtype)

    def bw(g):
        gb = g[None] if squeeze else g
        g2 = gb.reshape(batch, cout, ho * wo)
        if kernels.requires_grad:
            dw = (g2 @ cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernels.shape)
            _accum(kernels, dw)
        if x.requires_grad:
            dcols = (w2.T @ g2).reshape(batch, cin, kh, kw, ho, wo)
            dxp = np.zeros((batch, cin, hp, wp), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
            dx = dxp[:, :, padding:padding + h, padding:padding + w]
            _accum(x, dx[0] if squeeze else dx)

    _record(out, bw)
    return out


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling with window = stride = ``size``.

    Trailing rows/columns that do not fill a window are dropped; their
    gradient is zero. Ties route the gradient to the first maximum.
    """
    if size < 1:
        raise ContractError(f"max_pool2d: size must be >= 1, got {size}")
    squeeze = x.ndim == 3
    if x.ndim not in (3, 4):
        raise DimensionError(f"max_pool2d: input must be [C,H,W] or [B,C,H,W], got {x.shape}")
    xb = x.data[None] if squeeze else x.data
    batch, c, h, w = xb.shape
    ho, wo = h // size, w // size
    if ho < 1 or wo < 1:
        raise DimensionError(f"max_pool2d: window {size} larger than input {h}x{w}")
    xt = xb[:, :, :ho * size, :wo * size]
    win = xt.reshape(batch, c, ho, size, wo, size).transpose(0, 1, 2, 4, 3, 5)
    win = np.ascontiguousarray(win).reshape(batch, c, ho, wo, size * size)
    idx = win.argmax(axis=-1)
    out_data = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    if squeeze:
        out_data = out_data[0]
    out = Tensor(out_data, requires_grad=x.requires_grad, dtype=out_data.dtype)

    def bw(g):
        gb = g[None] if squeeze else g
        dwin = np.zeros((batch, c, ho, wo, size * size), dtype=g.dtype)
        np.put_along_axis(dwin, idx[..., None], gb[..., None], axis=-1)
        dxt = dwin.reshape(batch, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5)
        dx = np.zeros((batch, c, h, w), dtype=g.dtype)
        dx[:, :, :ho * size, :wo * size] = dxt.reshape(batch, c, ho * size, wo * size)
        _accum(x, dx[0] if squeeze else dx)

    _record(out, bw)
    return out


# ---------------------------------------------------------------------------
# normalization / reductions / movement
# ---------------------------------------------------------------------------

def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise DimensionError(f"layer_norm: gain/bias must be ({n},), got {gain.shape}/{bias.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=xd.dtype))
    xh = (xd - mu) * inv
    out_data = xh * gain.data + bias.data
    out = Tensor(out_data, requires_grad=x.requires_grad or gain.requires_grad or bias.requires_grad,
                 dtype=out_data.dtype)

    def bw(g):
        red = tuple(range(g.ndim - 1))
        _accum(gain, (g * xh).sum(axis=red))
        _accum(bias, g.sum(axis=red))
        if x.requires_grad:
            dxh = g * gain.data
            dx = (inv / n) * (n * dxh - dxh.sum(axis=-1, keepdims=True)
                              - xh * (dxh * xh).sum(axis=-1, keepdims=True))
            _accum(x, dx)

    _record(out, bw)
    return out


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = x.data.sum(axis=axis, keepdims=keepdims)
    out = Tensor(out_data, requires_grad=x.requires_grad, dtype=x.data.dtype)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g, x.shape).copy() if np.ndim(g) else np.full(x.shape, g, dtype=x.data.dtype))

    _record(out, bw)
    return out


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    out_data = x.data.mean(axis=axis, keepdims=keepdims)
    out = Tensor(out_data, requires_grad=x.requires_grad, dtype=x.data.dtype)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        scaled = np.asarray(g, dtype=x.data.dtype) / count
        _accum(x, np.broadcast_to(scaled, x.shape).copy())

    _record(out, bw)
    return out


def cast(x: Tensor, dtype) -> Tensor:
    """Change storage dtype; the gradient is cast back on the way down."""
    dt = np.dtype(dtype).type
    if dt not in _FLOAT_DTYPES:
        raise ContractError(f"cast target must be float32 or float64, got {np.dtype(dtype)}")
    out = Tensor(x.data.astype(dt), requires_grad=x.requires_grad, dtype=dt)

    def bw(g):
        _accum(x, g.astype(x.data.dtype))

    _record(out, bw)
    return out


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out_data = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}") from None
    out = Tensor(out_data, requires_grad=x.requires_grad, dtype=x.data.dtype)

    def bw(g):
        _accum(x, g.reshape(x.shape))

    _record(out, bw)
    return out


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"transpose: axes {axes} invalid for {x.ndim}-d tensor")
    out = Tensor(x.data.transpose(axes), requires_grad=x.requires_grad, dtype=x.data.dtype)
    inv = tuple(np.argsort(axes))

    def bw(g):
        _accum(x, g.transpose(inv))

    _record(out, bw)
    return out


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = list(tensors)
    if not ts:
        raise ContractError("concat needs at least one tensor")
    try:
        out_data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise DimensionError(f"concat: shapes {[t.shape for t in ts]} incompatible on axis {axis}") from None
    out = Tensor(out_data, requires_grad=any(t.requires_grad for t in ts), dtype=out_data.dtype)
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        for t, piece in zip(ts, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    _record(out, bw)
    return out


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

BCE_EPS = 1e-7


def binary_cross_entropy(probs: Tensor, targets: Tensor, eps: float = BCE_EPS) -> Tensor:
    """Mean BCE with probabilities clamped to [eps, 1 - eps].

    The clamp is a hard clip: probabilities outside the window get zero
    gradient. Targets carry no gradient.
    """
    if probs.shape != targets.shape:
        raise DimensionError(f"bce: probs {probs.shape} and targets {targets.shape} differ")
    pd = probs.data
    yd = targets.data
    pc = np.clip(pd, eps, 1.0 - eps)
    losses = -(yd * np.log(pc) + (1.0 - yd) * np.log1p(-pc))
    out = Tensor(np.asarray(losses.mean(), dtype=pd.dtype), requires_grad=probs.requires_grad, dtype=pd.dtype)
    inside = (pd > eps) & (pd < 1.0 - eps)

    def bw(g):
        dp = np.where(inside, (pc - yd) / (pc * (1.0 - pc)), 0.0) / pd.size
        _accum(probs, g * dp.astype(pd.dtype))

    _record(out, bw)
    return out
