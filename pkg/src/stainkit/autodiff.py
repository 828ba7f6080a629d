"""Float32 tensors with tape-based reverse-mode automatic differentiation.

The engine is deliberately small: dense arrays up to rank 4, elementwise
arithmetic that broadcasts only scalar-with-tensor, plain and batched matmul,
strided convolutions, and the handful of nonlinearities the stain model
needs. Operations executed inside an active ``Tape`` record closures that
replay in exact reverse order; gradients accumulate additively into
``Tensor.grad`` until the caller clears them. Tensors are treated as
immutable once created (optimizers update leaf parameters between tapes,
never recorded intermediates).
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

EPSILON = 1e-8

_MAX_RANK = 4


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class GraphError(RuntimeError):
    """backward() was asked to differentiate something not on a tape."""


class Diagnostics:
    """Counters for numerically guarded events, for post-run inspection."""

    def __init__(self):
        self.zero_norm_cosine = 0

    def reset(self):
        self.zero_norm_cosine = 0


diagnostics = Diagnostics()


class Tensor:
    """Dense float32 array with an optional accumulated gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        # order="C" rather than ascontiguousarray: the latter promotes 0-d to (1,)
        arr = np.asarray(data, dtype=np.float32, order="C")
        if arr.ndim > _MAX_RANK:
            raise ShapeError(f"rank {arr.ndim} exceeds the supported maximum of {_MAX_RANK}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return stop_gradient(self)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def transpose(self, axes) -> "Tensor":
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis=axis, keepdims=keepdims)

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
        return scale(self, -1.0)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float32), requires_grad)


def ones_like(t: Tensor) -> Tensor:
    return Tensor(np.ones_like(t.data))


def zeros_like(t: Tensor) -> Tensor:
    return Tensor(np.zeros_like(t.data))


# --- tape ---------------------------------------------------------------

_TAPE_STACK: list["Tape"] = []


class Tape:
    """Records operations so gradients can be replayed in reverse order."""

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._outputs: set[int] = set()

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPE_STACK.pop()
        return False

    def __len__(self) -> int:
        return len(self._records)

    def clear(self):
        self._records.clear()
        self._outputs.clear()

    def backward(self, loss: Tensor):
        _run_backward(self, loss)


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def backward(loss: Tensor):
    """Reverse-accumulate gradients of a scalar loss over the active tape."""
    tape = _active_tape()
    if tape is None:
        raise GraphError("backward() called with no active tape")
    _run_backward(tape, loss)


def _run_backward(tape: Tape, loss: Tensor):
    if not isinstance(loss, Tensor):
        raise TypeError("loss must be a Tensor")
    if loss.data.size != 1:
        raise GraphError(f"loss must be scalar, got shape {loss.shape}")
    if id(loss) not in tape._outputs:
        raise GraphError("loss is detached from this tape; nothing to differentiate")
    # Per-pass flow buffers keep repeated backward() calls additive in .grad
    # without double-counting earlier passes.
    flow: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for out, inputs, fn in reversed(tape._records):
        g = flow.get(id(out))
        if g is None:
            continue
        for t, gi in zip(inputs, fn(g)):
            if gi is None or not t.requires_grad:
                continue
            gi = np.asarray(gi, dtype=np.float32)
            if gi.shape != t.shape:
                raise ShapeError(
                    f"gradient shape {gi.shape} does not match tensor shape {t.shape}"
                )
            key = id(t)
            if key in flow:
                flow[key] = flow[key] + gi
            else:
                flow[key] = gi
                holders[key] = t
    for key, t in holders.items():
        g = flow[key]
        t.grad = g.copy() if t.grad is None else t.grad + g


def _record(out: Tensor, inputs: tuple[Tensor, ...], fn: Callable) -> Tensor:
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape._records.append((out, inputs, fn))
        tape._outputs.add(id(out))
    return out


# --- elementwise arithmetic ----------------------------------------------


def _coerce(x):
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (int, float, np.integer, np.floating)):
        return float(x)
    raise TypeError(f"expected Tensor or scalar, got {type(x).__name__}")


def _binary(a, b, name, fwd, da, db):
    a = _coerce(a)
    b = _coerce(b)
    a_t = isinstance(a, Tensor)
    b_t = isinstance(b, Tensor)
    if not a_t and not b_t:
        raise TypeError(f"{name} needs at least one Tensor operand")
    if a_t and b_t and a.shape != b.shape and a.shape != () and b.shape != ():
        raise ShapeError(f"{name}: shape mismatch {a.shape} vs {b.shape}")
    av = a.data if a_t else np.float32(a)
    bv = b.data if b_t else np.float32(b)
    rg = (a_t and a.requires_grad) or (b_t and b.requires_grad)
    out = Tensor(fwd(av, bv), requires_grad=rg)
    inputs = tuple(t for t in (a, b) if isinstance(t, Tensor))

    def fn(g):
        grads = []
        if a_t:
            ga = np.asarray(da(g, av, bv), dtype=np.float32)
            if a.shape == () and ga.shape != ():
                ga = ga.sum(dtype=np.float64).astype(np.float32)
            grads.append(ga.reshape(a.shape))
        if b_t:
            gb = np.asarray(db(g, av, bv), dtype=np.float32)
            if b.shape == () and gb.shape != ():
                gb = gb.sum(dtype=np.float64).astype(np.float32)
            grads.append(gb.reshape(b.shape))
        return tuple(grads)

    return _record(out, inputs, fn)


def add(a, b) -> Tensor:
    return _binary(a, b, "add", lambda x, y: x + y, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    return _binary(a, b, "sub", lambda x, y: x - y, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    return _binary(a, b, "mul", lambda x, y: x * y, lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b) -> Tensor:
    return _binary(
        a, b, "div",
        lambda x, y: x / y,
        lambda g, x, y: g / y,
        lambda g, x, y: -g * x / (y * y),
    )


def scale(x: Tensor, factor) -> Tensor:
    """Multiply a tensor by a python scalar."""
    return mul(x, float(factor))


# --- matmul and reductions ------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if not isinstance(a, Tensor) or not isinstance(b, Tensor):
        raise TypeError("matmul expects Tensor operands")
    ra, rb = a.data.ndim, b.data.ndim
    if not (ra == rb == 2 or ra == rb == 3):
        raise ShapeError(f"matmul expects both rank 2 or both rank 3, got {ra} and {rb}")
    if ra == 3 and a.shape[0] != b.shape[0]:
        raise ShapeError(f"matmul batch mismatch: {a.shape[0]} vs {b.shape[0]}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data, requires_grad=a.requires_grad or b.requires_grad)
    ad, bd = a.data, b.data

    def fn(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _record(out, (a, b), fn)


def _normalize_axis(axis, rank):
    if axis is None:
        return None
    axis = int(axis)
    if not -rank <= axis < rank:
        raise ShapeError(f"axis {axis} out of range for rank {rank}")
    return axis % rank


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    ax = _normalize_axis(axis, x.data.ndim)
    val = np.sum(x.data, axis=ax, keepdims=keepdims, dtype=np.float64).astype(np.float32)
    shape = x.shape

    def fn(g):
        gg = g
        if ax is not None and not keepdims:
            gg = np.expand_dims(gg, ax)
        return (np.broadcast_to(gg, shape).astype(np.float32),)

    return _record(Tensor(val, x.requires_grad), (x,), fn)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    ax = _normalize_axis(axis, x.data.ndim)
    n = x.data.size if ax is None else x.shape[ax]
    if n == 0:
        raise ShapeError("mean over an empty extent")
    return scale(reduce_sum(x, axis=ax, keepdims=keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    val = x.data.reshape(shape)
    old = x.shape

    def fn(g):
        return (g.reshape(old),)

    return _record(Tensor(val, x.requires_grad), (x,), fn)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.data.ndim)):
        raise ShapeError(f"invalid permutation {axes} for rank {x.data.ndim}")
    inv = np.argsort(axes)

    def fn(g):
        return (np.transpose(g, inv),)

    return _record(Tensor(np.transpose(x.data, axes), x.requires_grad), (x,), fn)


# --- convolutions ---------------------------------------------------------


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    b, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    hp, wp = x.shape[2], x.shape[3]
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    cols = np.empty((b, c, kh, kw, oh, ow), dtype=np.float32)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    return cols.reshape(b, c * kh * kw, oh * ow), oh, ow


def _col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int, padding: int):
    b, c, h, w = x_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    out = np.zeros((b, c, hp, wp), dtype=np.float32)
    cols = cols.reshape(b, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols[:, :, i, j]
    if padding:
        out = out[:, :, padding : padding + h, padding : padding + w]
    return out


def _check_conv_operands(x, kernel, bias, kernel_in_axis, bias_dim, stride, padding):
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError("conv operands must be rank 4 (batch, channel, height, width)")
    if stride < 1 or padding < 0:
        raise ShapeError(f"invalid stride {stride} or padding {padding}")
    if kernel.shape[kernel_in_axis] != x.shape[1]:
        raise ShapeError(
            f"kernel expects {kernel.shape[kernel_in_axis]} input channels, image has {x.shape[1]}"
        )
    if bias is not None and bias.shape != (bias_dim,):
        raise ShapeError(f"bias shape {bias.shape} does not match {bias_dim} output channels")


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0,
           bias: Tensor | None = None) -> Tensor:
    """2-D convolution (cross-correlation) over (batch, channel, h, w)."""
    _check_conv_operands(x, kernel, bias, 1, kernel.shape[0], stride, padding)
    o, c, kh, kw = kernel.shape
    b, _, h, w = x.shape
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    cols, oh, ow = _im2col(x.data, kh, kw, stride, padding)
    kmat = kernel.data.reshape(o, -1)
    val = np.matmul(kmat, cols).reshape(b, o, oh, ow)
    if bias is not None:
        val = val + bias.data.reshape(1, o, 1, 1)
    rg = x.requires_grad or kernel.requires_grad or (bias is not None and bias.requires_grad)
    x_shape = x.shape

    def fn(g):
        gmat = g.reshape(b, o, -1)
        gk = np.einsum("bop,bqp->oq", gmat, cols).astype(np.float32).reshape(kernel.shape)
        gcols = np.matmul(kmat.T, gmat)
        gx = _col2im(gcols, x_shape, kh, kw, stride, padding)
        if bias is None:
            return gx, gk
        return gx, gk, g.sum(axis=(0, 2, 3), dtype=np.float64).astype(np.float32)

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _record(Tensor(val, rg), inputs, fn)


def conv_transpose2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0,
                     bias: Tensor | None = None) -> Tensor:
    """Transposed 2-D convolution; kernel laid out (in_ch, out_ch, kh, kw)."""
    _check_conv_operands(x, kernel, bias, 0, kernel.shape[1], stride, padding)
    ci, co, kh, kw = kernel.shape
    b, _, h, w = x.shape
    oh = (h - 1) * stride - 2 * padding + kh
    ow = (w - 1) * stride - 2 * padding + kw
    if oh < 1 or ow < 1:
        raise ShapeError(f"transposed conv collapses {h}x{w} input to {oh}x{ow}")
    kmat = kernel.data.reshape(ci, co * kh * kw)
    xmat = x.data.reshape(b, ci, h * w)
    cols = np.matmul(kmat.T, xmat)
    val = _col2im(cols, (b, co, oh, ow), kh, kw, stride, padding)
    if bias is not None:
        val = val + bias.data.reshape(1, co, 1, 1)
    rg = x.requires_grad or kernel.requires_grad or (bias is not None and bias.requires_grad)

    def fn(g):
        gcols, goh, gow = _im2col(g, kh, kw, stride, padding)
        gx = np.matmul(kmat, gcols).reshape(b, ci, h, w)
        gk = np.einsum("bip,bqp->iq", xmat, gcols).astype(np.float32).reshape(kernel.shape)
        if bias is None:
            return gx, gk
        return gx, gk, g.sum(axis=(0, 2, 3), dtype=np.float64).astype(np.float32)

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _record(Tensor(val, rg), inputs, fn)


# --- nonlinearities -------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    ax = _normalize_axis(axis, x.data.ndim)
    if ax is None:
        raise ShapeError("softmax needs an explicit axis")
    shifted = x.data.astype(np.float64)
    shifted = shifted - shifted.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    y64 = e / e.sum(axis=ax, keepdims=True)
    y = y64.astype(np.float32)

    def fn(g):
        dot = (g * y).sum(axis=ax, keepdims=True)
        return ((y * (g - dot)).astype(np.float32),)

    return _record(Tensor(y, x.requires_grad), (x,), fn)


def sigmoid(x: Tensor) -> Tensor:
    y = (1.0 / (1.0 + np.exp(-x.data.astype(np.float64)))).astype(np.float32)

    def fn(g):
        return (g * y * (1.0 - y),)

    return _record(Tensor(y, x.requires_grad), (x,), fn)


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    """GELU in its tanh form."""
    v = x.data
    u = _GELU_C * (v + _GELU_A * v ** 3)
    t = np.tanh(u)
    y = 0.5 * v * (1.0 + t)

    def fn(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * v * v)
        dy = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du
        return (g * dy,)

    return _record(Tensor(y, x.requires_grad), (x,), fn)


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.data < 0):
        raise ValueError("sqrt of a negative value")
    y = np.sqrt(x.data)

    def fn(g):
        # guarded so a zero radicand propagates a finite (then vanishing) grad
        return (g / (2.0 * y + 1e-12),)

    return _record(Tensor(y, x.requires_grad), (x,), fn)


def stop_gradient(x: Tensor) -> Tensor:
    """Forward identity that detaches the value from the tape."""
    return Tensor(x.data.copy(), requires_grad=False)


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity of two equal-shape tensors, flattened to vectors.

    The denominator carries a +1e-8 guard, so two zero vectors compare to 0
    (counted in ``diagnostics.zero_norm_cosine``) and the result can sit a
    hair inside [-1, 1] rather than exactly on it.
    """
    if a.shape != b.shape:
        raise ShapeError(f"cosine_similarity shape mismatch {a.shape} vs {b.shape}")
    af = reshape(a, (-1,))
    bf = reshape(b, (-1,))
    num = reduce_sum(mul(af, bf))
    na = sqrt(reduce_sum(mul(af, af)))
    nb = sqrt(reduce_sum(mul(bf, bf)))
    if float(na.data) == 0.0 and float(nb.data) == 0.0:
        diagnostics.zero_norm_cosine += 1
    return div(num, add(mul(na, nb), EPSILON))


# --- indexed and affine helpers -------------------------------------------


def gather_rows(table: Tensor, indices) -> Tensor:
    """Select rows of a rank-2 tensor; backward scatter-adds into the table."""
    idx = np.asarray(indices, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError(f"gather_rows needs a rank-2 table, got {table.shape}")
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows needs 1-D indices, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError("gather index out of range")
    val = table.data[idx]

    def fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _record(Tensor(val, table.requires_grad), (table,), fn)


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a vector along the last axis."""
    n = x.shape[-1] if x.data.ndim else 0
    if bias.data.ndim != 1 or bias.shape[0] != n:
        raise ShapeError(f"bias shape {bias.shape} does not match last extent {n}")
    out = Tensor(x.data + bias.data, x.requires_grad or bias.requires_grad)

    def fn(g):
        return g, g.reshape(-1, n).sum(axis=0, dtype=np.float64).astype(np.float32)

    return _record(out, (x, bias), fn)


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply elementwise gain and shift."""
    n = x.shape[-1] if x.data.ndim else 0
    if gain.shape != (n,) or shift.shape != (n,):
        raise ShapeError(f"layer_norm parameters must have shape ({n},)")
    mu = x.data.mean(axis=-1, keepdims=True, dtype=np.float64)
    var = x.data.astype(np.float64).var(axis=-1, keepdims=True)
    inv = (1.0 / np.sqrt(var + eps)).astype(np.float32)
    xhat = ((x.data - mu) * inv).astype(np.float32)
    out = Tensor(xhat * gain.data + shift.data,
                 x.requires_grad or gain.requires_grad or shift.requires_grad)

    def fn(g):
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        gx = (inv * (dxhat - m1 - xhat * m2)).astype(np.float32)
        ggain = (g * xhat).reshape(-1, n).sum(axis=0, dtype=np.float64).astype(np.float32)
        gshift = g.reshape(-1, n).sum(axis=0, dtype=np.float64).astype(np.float32)
        return gx, ggain, gshift

    return _record(out, (x, gain, shift), fn)
