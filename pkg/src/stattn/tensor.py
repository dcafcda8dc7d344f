"""Minimal reverse-mode autodiff on numpy arrays.

A Tensor wraps an ndarray plus an optional closure that propagates gradients
to its parents; backward() walks the recorded graph in reverse topological
order. float32 is the working precision, float64 is used by the gradient
checks. Every operation validates that its result is finite and raises
NonFiniteError otherwise (disable via finite_checks(False) for benchmarks).

Tensors are treated as immutable once created; the only sanctioned mutation
is an optimizer writing into `.data`/`.grad` of leaf parameters and the
running-statistics buffers updated by batch_norm. Graphs are built and
consumed within a single thread.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from stattn import _kernels
from stattn.errors import NonFiniteError, ShapeError

DEFAULT_DTYPE = np.float32

_GELU_K = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715

_grad_enabled = True
_finite_checks = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / data paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextmanager
def finite_checks(enabled: bool):
    global _finite_checks
    prev = _finite_checks
    _finite_checks = enabled
    try:
        yield
    finally:
        _finite_checks = prev


def _checked(data: np.ndarray, op: str) -> np.ndarray:
    if _finite_checks and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by {op}")
    return data


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """An ndarray with an optional gradient and a backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._backward: Callable[[np.ndarray], None] | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._op = "leaf"

    # -- bookkeeping ------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_err(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, op={self._op})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self) -> None:
        """Backpropagate from this scalar through the recorded graph."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ----------------------------------------------------

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return pow_scalar(self, p)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def _scalar_err(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) and dtype is None else Tensor(x, dtype=dtype)


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(_checked(data, op))
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    else:
        out._op = op
    return out


def _coerce_pair(a, b) -> tuple[Tensor, Tensor]:
    # plain numbers adopt the other operand's dtype so f32 graphs stay f32
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.data.dtype))
    if not isinstance(a, Tensor) and isinstance(b, Tensor):
        return Tensor(np.asarray(a, dtype=b.data.dtype)), b
    return as_tensor(a), as_tensor(b)


# -- arithmetic -------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(out_data, "add", (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    out_data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make(out_data, "sub", (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(out_data, "mul", (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    out_data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out_data, "div", (a, b), backward)


def pow_scalar(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    out_data = a.data**p

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * p * a.data ** (p - 1.0))

    return _make(out_data, "pow", (a,), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * out_data)

    return _make(out_data, "exp", (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.log(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g / a.data)

    return _make(out_data, "log", (a,), backward)


def matmul(a, b) -> Tensor:
    """Batched matrix product; leading batch dims broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accumulate(_unbroadcast(gb, b.shape))

    return _make(out_data, "matmul", (a, b), backward)


# -- shape ops ---------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    out_data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape))

    return _make(out_data, "reshape", (a,), backward)


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(int(x) for x in axes)
    inv = tuple(np.argsort(axes))
    out_data = np.ascontiguousarray(a.data.transpose(axes))

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.transpose(inv))

    return _make(out_data, "transpose", (a,), backward)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape).copy())
            return
        if not keepdims:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            g = np.expand_dims(g, tuple(ax % a.ndim for ax in axes))
        a._accumulate(np.broadcast_to(g, a.shape).copy())

    return _make(out_data, "sum", (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax % a.ndim] for ax in axes]))
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


# -- softmax / activations ----------------------------------------------------


def softmax_lastdim(a) -> Tensor:
    """Softmax over the last axis, stabilized by subtracting the row max.

    The subtracted max is treated as a constant; by shift invariance the
    gradient is unchanged.
    """
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        if a.requires_grad:
            gy = g * out_data
            a._accumulate(gy - out_data * gy.sum(axis=-1, keepdims=True))

    return _make(out_data, "softmax_lastdim", (a,), backward)


def gelu(a) -> Tensor:
    """tanh-approximation GELU: 0.5*x*(1 + tanh(K*(x + A*x^3)))."""
    a = as_tensor(a)
    x = a.data
    t = np.tanh(_GELU_K * (x + _GELU_A * x**3))
    out_data = 0.5 * x * (1.0 + t)

    def backward(g):
        if a.requires_grad:
            du = _GELU_K * (1.0 + 3.0 * _GELU_A * x**2)
            a._accumulate(g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du))

    return _make(out_data, "gelu", (a,), backward)


def swish(a) -> Tensor:
    """x * sigmoid(x)."""
    a = as_tensor(a)
    s = 1.0 / (1.0 + np.exp(-a.data))
    out_data = a.data * s

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * s * (1.0 + a.data * (1.0 - s)))

    return _make(out_data, "swish", (a,), backward)


# -- pooling / windowing -------------------------------------------------------


def adaptive_avg_pool(a, out_hw: tuple[int, int]) -> Tensor:
    """Average [b,c,H,W] down to [b,c,p,q]; H,W must be divisible by p,q."""
    a = as_tensor(a)
    if a.ndim != 4:
        raise ShapeError(f"adaptive_avg_pool needs rank 4, got {a.shape}")
    b, c, h, w = a.shape
    p, q = (int(x) for x in out_hw)
    if p <= 0 or q <= 0 or h % p or w % q:
        raise ShapeError(f"pool output {p}x{q} must divide input {h}x{w}")
    bh, bw = h // p, w // q
    out_data = a.data.reshape(b, c, p, bh, q, bw).mean(axis=(3, 5))

    def backward(g):
        if a.requires_grad:
            g6 = np.broadcast_to(
                g.reshape(b, c, p, 1, q, 1), (b, c, p, bh, q, bw)
            ) / (bh * bw)
            a._accumulate(g6.reshape(a.shape).astype(g.dtype))

    return _make(out_data, "adaptive_avg_pool", (a,), backward)


def _im2col_op(a: Tensor, kh: int, kw: int, stride: int, pad: int) -> Tensor:
    b, c, h, w = a.shape
    out_data = _kernels.im2col(a.data, kh, kw, stride, pad)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_kernels.col2im(g, h, w, kh, kw, stride, pad))

    return _make(out_data, "im2col", (a,), backward)


def unfold3x3(a) -> Tensor:
    """Extract zero-padded 3x3 windows from [b,c,h,w] as [b, c*9, h*w].

    Row layout is channel-major with the 9 window cells row-major inside each
    channel: row c*9 + ky*3 + kx. Column l corresponds to center (l//w, l%w).
    """
    a = as_tensor(a)
    if a.ndim != 4:
        raise ShapeError(f"unfold3x3 needs rank 4, got {a.shape}")
    return _im2col_op(a, 3, 3, 1, 1)


def fold3x3(cols, h: int, w: int) -> Tensor:
    """Adjoint of unfold3x3: scatter-add [b, c*9, h*w] windows back to [b,c,h,w].

    fold3x3(unfold3x3(x)) multiplies each position by its window overlap count
    (9 in the interior, 6 on edges, 4 in corners for a 3x3 grid).
    """
    cols = as_tensor(cols)
    if cols.ndim != 3 or cols.shape[1] % 9:
        raise ShapeError(f"fold3x3 needs [b, c*9, h*w], got {cols.shape}")
    if cols.shape[2] != h * w:
        raise ShapeError(f"fold3x3 column count {cols.shape[2]} != {h}*{w}")
    out_data = _kernels.col2im(cols.data, h, w, 3, 3, 1, 1)

    def backward(g):
        if cols.requires_grad:
            cols._accumulate(_kernels.im2col(g, 3, 3, 1, 1))

    return _make(out_data, "fold3x3", (cols,), backward)


def conv2d(x, w, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of [b,cin,h,w] with [cout,cin,kh,kw] (no bias)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d needs rank-4 input/kernel, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, kernel {w.shape}")
    b, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    oh = _kernels.conv_out_extent(h, kh, stride, pad)
    ow = _kernels.conv_out_extent(wd, kw, stride, pad)
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv2d output would be empty for input {x.shape}")
    cols = _im2col_op(x, kh, kw, stride, pad)
    out = matmul(reshape(w, (cout, cin * kh * kw)), cols)
    return reshape(out, (b, cout, oh, ow))


def depthwise_conv3x3(x, w) -> Tensor:
    """Per-channel 3x3 cross-correlation, stride 1, pad 1. w: [c,3,3]."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 3 or w.shape[1:] != (3, 3):
        raise ShapeError(f"depthwise_conv3x3 needs [b,c,h,w] and [c,3,3], got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"depthwise channel mismatch: {x.shape} vs {w.shape}")
    out_data = _kernels.depthwise3x3_forward(x.data, w.data)

    def backward(g):
        if x.requires_grad:
            x._accumulate(_kernels.depthwise3x3_grad_input(g, w.data))
        if w.requires_grad:
            w._accumulate(_kernels.depthwise3x3_grad_weight(x.data, g))

    return _make(out_data, "depthwise_conv3x3", (x, w), backward)


# -- cell <-> token rearrangement (grid layout used by the attention module) --


def split_cells(x, cell_h: int, cell_w: int) -> Tensor:
    """Rearrange [b,C,p*cell_h,q*cell_w] into per-cell tokens [b, p*q, cell_h*cell_w, C].

    Cell (y,x) owns the input patch rows [y*cell_h, (y+1)*cell_h) and columns
    [x*cell_w, (x+1)*cell_w); within a cell, tokens are row-major.
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"split_cells needs rank 4, got {x.shape}")
    b, c, h, w = x.shape
    if h % cell_h or w % cell_w:
        raise ShapeError(f"cells {cell_h}x{cell_w} must tile input {h}x{w}")
    p, q = h // cell_h, w // cell_w
    out_data = np.ascontiguousarray(
        x.data.reshape(b, c, p, cell_h, q, cell_w)
        .transpose(0, 2, 4, 3, 5, 1)
        .reshape(b, p * q, cell_h * cell_w, c)
    )

    def backward(g):
        if x.requires_grad:
            x._accumulate(
                g.reshape(b, p, q, cell_h, cell_w, c)
                .transpose(0, 5, 1, 3, 2, 4)
                .reshape(b, c, h, w)
            )

    return _make(out_data, "split_cells", (x,), backward)


def merge_cells(t, p: int, q: int, cell_h: int, cell_w: int) -> Tensor:
    """Inverse of split_cells: [b, p*q, cell_h*cell_w, C] -> [b, C, p*cell_h, q*cell_w]."""
    t = as_tensor(t)
    if t.ndim != 4:
        raise ShapeError(f"merge_cells needs rank 4, got {t.shape}")
    b, m, hw, c = t.shape
    if m != p * q or hw != cell_h * cell_w:
        raise ShapeError(
            f"merge_cells geometry mismatch: {t.shape} vs p*q={p * q}, cell={cell_h}x{cell_w}"
        )
    h, w = p * cell_h, q * cell_w
    out_data = np.ascontiguousarray(
        t.data.reshape(b, p, q, cell_h, cell_w, c)
        .transpose(0, 5, 1, 3, 2, 4)
        .reshape(b, c, h, w)
    )

    def backward(g):
        if t.requires_grad:
            t._accumulate(
                g.reshape(b, c, p, cell_h, q, cell_w)
                .transpose(0, 2, 4, 3, 5, 1)
                .reshape(b, m, hw, c)
            )

    return _make(out_data, "merge_cells", (t,), backward)


def take_rows(a, idx) -> Tensor:
    """Row gather out[i, ...] = a[idx[i], ...]; backward scatter-adds rows."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1 or a.ndim < 1:
        raise ShapeError(f"take_rows needs 1-D indices and rank >= 1 input, got {idx.shape}, {a.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(f"take_rows index out of range for {a.shape[0]} rows")
    out_data = a.data[idx]

    def backward(g):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            np.add.at(ga, idx, g)
            a._accumulate(ga)

    return _make(out_data, "take_rows", (a,), backward)


# -- normalization --------------------------------------------------------------


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize [b,C,H,W] over the channel axis at every spatial position."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if x.ndim != 4:
        raise ShapeError(f"layer_norm needs rank 4, got {x.shape}")
    c = x.shape[1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise ShapeError(f"layer_norm params must be [{c}], got {gain.shape}, {bias.shape}")
    mu = mean(x, axis=1, keepdims=True)
    xc = sub(x, mu)
    var = mean(mul(xc, xc), axis=1, keepdims=True)
    xhat = div(xc, pow_scalar(add(var, eps), 0.5))
    return add(mul(xhat, reshape(gain, (1, c, 1, 1))), reshape(bias, (1, c, 1, 1)))


def batch_norm(
    x,
    gain,
    bias,
    running_mean,
    running_var,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Normalize [b,C,H,W] per channel over (batch, H, W).

    In training mode the batch statistics are used and the running buffers
    (plain Tensors, not part of the graph) are updated in place with
    running = (1 - momentum) * running + momentum * batch. In inference mode
    the running buffers are used as constants. Variance is the biased
    estimator in both modes.
    """
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if x.ndim != 4:
        raise ShapeError(f"batch_norm needs rank 4, got {x.shape}")
    c = x.shape[1]
    if training:
        mu = mean(x, axis=(0, 2, 3), keepdims=True)
        xc = sub(x, mu)
        var = mean(mul(xc, xc), axis=(0, 2, 3), keepdims=True)
        running_mean.data = (
            (1.0 - momentum) * running_mean.data + momentum * mu.data.reshape(c)
        ).astype(running_mean.data.dtype)
        running_var.data = (
            (1.0 - momentum) * running_var.data + momentum * var.data.reshape(c)
        ).astype(running_var.data.dtype)
        xhat = div(xc, pow_scalar(add(var, eps), 0.5))
    else:
        rm = running_mean.data.reshape(1, c, 1, 1)
        rv = running_var.data.reshape(1, c, 1, 1)
        xhat = mul(sub(x, Tensor(rm)), Tensor(1.0 / np.sqrt(rv + eps)))
    return add(mul(xhat, reshape(gain, (1, c, 1, 1))), reshape(bias, (1, c, 1, 1)))


# -- gradient checking -----------------------------------------------------------


def finite_difference(f: Callable[[Tensor], "Tensor | float"], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient estimate of scalar f at x, element by element."""
    base = x.data.astype(np.float64, copy=True)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = _eval_scalar(f, base, x.dtype)
        flat[i] = orig - h
        fm = _eval_scalar(f, base, x.dtype)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def _eval_scalar(f, data: np.ndarray, dtype) -> float:
    out = f(Tensor(data.astype(dtype)))
    return out.item() if isinstance(out, Tensor) else float(out)


def gradient_check(
    f: Callable[..., Tensor],
    inputs: Iterable[Tensor],
    h: float = 1e-5,
) -> float:
    """Max relative error between backward() and finite differences.

    f(*inputs) must return a scalar Tensor; inputs should be float64 for the
    stated tolerances to be meaningful. Relative error is measured as
    max|ad - fd| / (max|fd| + 1e-8) per input, worst case over inputs.
    """
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = f(*inputs)
    out.backward()
    worst = 0.0
    for idx, t in enumerate(inputs):

        def f_of(v: Tensor, idx=idx) -> Tensor:
            probe = inputs[:idx] + [v] + inputs[idx + 1 :]
            return f(*probe)

        fd = finite_difference(f_of, t, h=h)
        ad = np.zeros_like(t.data) if t.grad is None else t.grad
        err = float(np.max(np.abs(ad - fd)) / (np.max(np.abs(fd)) + 1e-8))
        worst = max(worst, err)
    return worst
