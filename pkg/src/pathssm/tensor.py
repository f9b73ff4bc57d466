"""Dense tensors with reverse-mode automatic differentiation.

Everything downstream (encoders, losses, heads) is built from the ops in
this module. Tensors wrap row-major numpy buffers (float32 for training,
float64 for gradient checking); each op records its parents and a VJP
closure, so `backward` on a scalar loss fills `.grad` on every node that
requires gradients. Gradients accumulate across backward calls until
`zero_grad`.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.special import erf as _erf

__all__ = [
    "Tensor",
    "tensor",
    "zeros",
    "ones",
    "no_grad",
    "backward",
    "zero_grad",
    "matmul",
    "softmax",
    "log_softmax",
    "silu",
    "rms_norm",
    "layer_norm",
    "l2_normalize",
    "depthwise_causal_conv1d",
    "bicubic_resize_2d",
    "bicubic_resize_array",
]

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / teacher passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense n-d array with optional gradient tracking.

    `data` is always a C-contiguous float numpy array. Tensors are treated
    as immutable once created; the only sanctioned mutation is an optimizer
    writing into `.data` of a leaf between steps.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._vjp: Optional[Callable] = None

    # -- bookkeeping -------------------------------------------------------

    @property
    def shape(self) -> tuple:
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
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype) -> "Tensor":
        out = _node(self.data.astype(dtype), (self,), lambda g: (g.astype(self.dtype),))
        return out

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape if len(shape) != 1 or not isinstance(shape[0], (tuple, list)) else shape[0])

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, dtype=np.float32, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=np.float32, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data: np.ndarray, parents: tuple, vjp: Callable) -> Tensor:
    """Create an op output, recording parents and the VJP if grads are on."""
    rg = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=rg)
    if rg:
        out._parents = parents
        out._vjp = vjp
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# -- elementwise arithmetic --------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "dtype", None))
    b = _as_tensor(b, a.dtype)
    return _node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "dtype", None))
    b = _as_tensor(b, a.dtype)
    return _node(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "dtype", None))
    b = _as_tensor(b, a.dtype)
    return _node(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "dtype", None))
    b = _as_tensor(b, a.dtype)
    return _node(
        a.data / b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, p: float) -> Tensor:
    out = a.data**p
    return _node(out, (a,), lambda g: (g * p * a.data ** (p - 1),))


# -- elementwise nonlinearities ----------------------------------------------


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def expm1(a: Tensor) -> Tensor:
    out = np.expm1(a.data)
    return _node(out, (a,), lambda g: (g * (out + 1.0),))


def log(a: Tensor) -> Tensor:
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    return _node(out, (a,), lambda g: (g * (a.data > 0),))


def silu(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _node(a.data * s, (a,), lambda g: (g * (s + a.data * s * (1.0 - s)),))


def gelu(a: Tensor) -> Tensor:
    """Exact GELU: x * Phi(x) with the Gaussian CDF."""
    x = a.data
    phi = 0.5 * (1.0 + _erf(x / math.sqrt(2.0)))
    out = x * phi
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return _node(out, (a,), lambda g: (g * (phi + x * pdf),))


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _node(out, (a,), lambda g: (g * _sigmoid(x),))


# -- reductions ---------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)
        gx = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gx, a.shape).astype(a.dtype, copy=True),)

    return _node(out, (a,), vjp)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.size if axis is None else a.shape[axis] if isinstance(axis, int) else int(np.prod([a.shape[ax] for ax in axis]))

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / n, a.shape).astype(a.dtype, copy=True),)
        gx = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gx / n, a.shape).astype(a.dtype, copy=True),)

    return _node(out, (a,), vjp)


def tmax(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    out = a.data.max(axis=axis, keepdims=keepdims)

    def vjp(g):
        ref = out if keepdims else np.expand_dims(out, axis)
        mask = (a.data == ref).astype(a.dtype)
        mask /= mask.sum(axis=axis, keepdims=True)  # split grad across ties
        gx = g if keepdims else np.expand_dims(g, axis)
        return (mask * gx,)

    return _node(out, (a,), vjp)


# -- shape ops ----------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def flip(a: Tensor, axis: int) -> Tensor:
    return _node(np.flip(a.data, axis=axis).copy(), (a,), lambda g: (np.flip(g, axis=axis).copy(),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _node(data, tuple(tensors), vjp)


def getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]

    def vjp(g):
        ga = np.zeros_like(a.data)
        ga[idx] = g
        return (ga,)

    return _node(np.ascontiguousarray(out), (a,), vjp)


# -- linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = _as_tensor(a, getattr(b, "dtype", None))
    b = _as_tensor(b, a.dtype)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(f"matmul: inner dimensions disagree for shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if b.ndim > 1 else np.expand_dims(g, -1) * b.data
        gb = np.swapaxes(a.data, -1, -2) @ g
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return _node(out, (a, b), vjp)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted softmax along `axis`; rows sum to one for any finite input."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _node(out, (x,), vjp)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _node(out, (x,), vjp)


# -- normalization ------------------------------------------------------------


def rms_norm(x: Tensor, scale: Tensor, eps: float = 1e-5) -> Tensor:
    ms = tmean(mul(x, x), axis=-1, keepdims=True)
    inv = power(add(ms, eps), -0.5)
    return mul(mul(x, inv), scale)


def layer_norm(x: Tensor, scale: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    mu = tmean(x, axis=-1, keepdims=True)
    xc = sub(x, mu)
    var = tmean(mul(xc, xc), axis=-1, keepdims=True)
    inv = power(add(var, eps), -0.5)
    return add(mul(mul(xc, inv), scale), shift)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    sq = tsum(mul(x, x), axis=axis, keepdims=True)
    return mul(x, power(add(sq, eps), -0.5))


# -- convolution --------------------------------------------------------------


def depthwise_causal_conv1d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Per-channel causal convolution over [batch, length, channels].

    The input is zero-padded on the left by k-1 positions, so the output at
    position t depends only on x[t-k+1 .. t]. kernel[c, -1] multiplies the
    current position.
    """
    B, L, C = x.shape
    Ck, k = kernel.shape
    if Ck != C or bias.shape != (C,):
        raise ValueError(f"conv1d: channel mismatch, input has {C} channels, kernel {kernel.shape}, bias {bias.shape}")
    xpad = np.zeros((B, L + k - 1, C), dtype=x.dtype)
    xpad[:, k - 1 :, :] = x.data
    out = np.zeros((B, L, C), dtype=x.dtype)
    for j in range(k):
        out += xpad[:, j : j + L, :] * kernel.data[:, j]
    out += bias.data

    def vjp(g):
        gpad = np.zeros_like(xpad)
        gk = np.zeros_like(kernel.data)
        for j in range(k):
            gpad[:, j : j + L, :] += g * kernel.data[:, j]
            gk[:, j] = (g * xpad[:, j : j + L, :]).sum(axis=(0, 1))
        return (gpad[:, k - 1 :, :], gk, g.sum(axis=(0, 1)))

    return _node(out, (x, kernel, bias), vjp)


# -- bicubic resampling -------------------------------------------------------

_CUBIC_A = -0.75


def _cubic_kernel(t: np.ndarray) -> np.ndarray:
    a = _CUBIC_A
    t = np.abs(t)
    out = np.zeros_like(t)
    m1 = t < 1.0
    m2 = (t >= 1.0) & (t < 2.0)
    out[m1] = (a + 2.0) * t[m1] ** 3 - (a + 3.0) * t[m1] ** 2 + 1.0
    out[m2] = a * t[m2] ** 3 - 5.0 * a * t[m2] ** 2 + 8.0 * a * t[m2] - 4.0 * a
    return out


def bicubic_weight_matrix(n_src: int, n_dst: int, dtype=np.float64) -> np.ndarray:
    """Row-stochastic (n_dst, n_src) matrix resampling one axis.

    Half-pixel-center convention (align-corners disabled) with the a=-0.75
    cubic kernel; taps are clamped at the borders.
    """
    scale = n_src / n_dst
    dst = np.arange(n_dst, dtype=np.float64)
    src = (dst + 0.5) * scale - 0.5
    base = np.floor(src).astype(np.int64)
    w = np.zeros((n_dst, n_src), dtype=np.float64)
    for tap in range(-1, 3):
        idx = np.clip(base + tap, 0, n_src - 1)
        wt = _cubic_kernel(src - (base + tap))
        np.add.at(w, (np.arange(n_dst), idx), wt)
    w /= w.sum(axis=1, keepdims=True)
    return w.astype(dtype)


def bicubic_resize_2d(grid: Tensor, target: tuple) -> Tensor:
    """Per-channel bicubic resize of an [H, W, d] grid to [H', W', d].

    Differentiable: the resample is two constant weight-matrix products, so
    gradients flow back to the source grid.
    """
    h2, w2 = int(target[0]), int(target[1])
    if h2 < 1 or w2 < 1:
        raise ValueError(f"bicubic_resize_2d: target dimensions must be positive, got {target}")
    H, W, d = grid.shape
    wr = Tensor(bicubic_weight_matrix(H, h2, dtype=grid.dtype))
    wc = Tensor(bicubic_weight_matrix(W, w2, dtype=grid.dtype))
    t1 = reshape(matmul(wr, reshape(grid, (H, W * d))), (h2, W, d))
    t2 = reshape(transpose(t1, (1, 0, 2)), (W, h2 * d))
    t3 = transpose(reshape(matmul(wc, t2), (w2, h2, d)), (1, 0, 2))
    return t3


def bicubic_resize_array(grid: np.ndarray, target: tuple) -> np.ndarray:
    """Plain-numpy bicubic resize for [H, W] or [H, W, C] arrays (no autograd)."""
    squeeze = grid.ndim == 2
    if squeeze:
        grid = grid[:, :, None]
    H, W, d = grid.shape
    h2, w2 = int(target[0]), int(target[1])
    if h2 < 1 or w2 < 1:
        raise ValueError(f"bicubic_resize_array: target dimensions must be positive, got {target}")
    wr = bicubic_weight_matrix(H, h2, dtype=np.float64)
    wc = bicubic_weight_matrix(W, w2, dtype=np.float64)
    out = np.einsum("ih,hwc->iwc", wr, grid.astype(np.float64))
    out = np.einsum("jw,iwc->ijc", wc, out).astype(grid.dtype)
    return out[:, :, 0] if squeeze else out


# -- backward pass ------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss.

    Visits each recorded node exactly once in reverse topological order and
    accumulates (+=) into `.grad` of every tensor with requires_grad, leaves
    included. Input data buffers are never touched.
    """
    if loss.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._vjp is None:
            continue
        parent_grads = node._vjp(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in pending:
                pending[id(p)] = pending[id(p)] + pg
            else:
                pending[id(p)] = pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
