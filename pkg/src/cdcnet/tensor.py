"""Dense NCHW tensors with reverse-mode automatic differentiation.

Every tensor gets a monotonically increasing node id at creation.  Parents
are always created before their children, so sorting the reachable graph by
descending id is a valid reverse topological order; that ordering is the tape
replayed by :func:`backward`.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from functools import lru_cache

import numpy as np

from . import kernels

_node_ids = itertools.count()
_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """N-dimensional float array with an optional gradient."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node = next(_node_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._op = ""

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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        op = f", op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{op})"

    def backward(self, grad=None) -> None:
        backward(self, grad)

    # arithmetic sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data, parents, backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._op = op
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, dim in enumerate(shape):
        if dim == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def backward(loss: Tensor, grad=None) -> None:
    """Populate ``.grad`` on every reachable tensor that requires it.

    Gradients accumulate across calls until cleared with ``zero_grad``.
    """
    if grad is None:
        if loss.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    else:
        grad = np.asarray(grad, dtype=loss.dtype).reshape(loss.shape)

    seen = {id(loss)}
    stack = [loss]
    nodes = []
    while stack:
        t = stack.pop()
        nodes.append(t)
        for p in t._parents:
            if id(p) not in seen:
                seen.add(id(p))
                stack.append(p)
    nodes.sort(key=lambda t: t.node, reverse=True)

    grads = {id(loss): grad}
    for t in nodes:
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.requires_grad:
            t.grad = g.copy() if t.grad is None else t.grad + g
        if t._backward is None:
            continue
        for p, pg in zip(t._parents, t._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            pg = np.asarray(pg, dtype=p.dtype)
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg


# elementwise -------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        a = as_tensor(a)
        return _result(a.data * np.asarray(c, dtype=a.dtype), (a,), lambda g: (g * c,), "scale")
    a = as_tensor(a)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), bw, "mul")


def square(x: Tensor) -> Tensor:
    return _result(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    y = (0.5 * (1.0 + np.tanh(0.5 * x.data))).astype(x.dtype)
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


# reductions and shape ----------------------------------------------------


def _expand_reduced(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        g = np.expand_dims(g, tuple(a % len(shape) for a in axes))
    return np.broadcast_to(g, shape)


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    def bw(g):
        return (np.array(_expand_reduced(g, x.shape, axis, keepdims)),)

    return _result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out = np.asarray(x.data.mean(axis=axis, keepdims=keepdims))
    count = x.data.size // max(out.size, 1)

    def bw(g):
        return (np.array(_expand_reduced(g, x.shape, axis, keepdims)) / count,)

    return _result(out, (x,), bw, "mean")


def amax(x: Tensor, axis: int, keepdims=False) -> Tensor:
    """Max along one axis; the gradient goes to the first maximal entry."""
    idx = np.expand_dims(x.data.argmax(axis=axis), axis)
    out = np.take_along_axis(x.data, idx, axis=axis)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        dx = np.zeros_like(x.data)
        np.put_along_axis(dx, idx, g, axis=axis)
        return (dx,)

    return _result(out if keepdims else out.squeeze(axis), (x,), bw, "amax")


def reshape(x: Tensor, shape) -> Tensor:
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def getitem(x: Tensor, index) -> Tensor:
    def bw(g):
        dx = np.zeros_like(x.data)
        dx[index] += g
        return (dx,)

    return _result(np.array(x.data[index]), (x,), bw, "getitem")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _result(np.stack([t.data for t in tensors], axis=axis), tensors, bw, "stack")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(np.matmul(a.data, b.data), (a, b), bw, "matmul")


# convolution family ------------------------------------------------------


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _check_conv(x: Tensor, w: Tensor, stride: int, padding: int) -> tuple[int, int]:
    if x.ndim != 4:
        raise ValueError(f"conv input must be NCHW, got shape {x.shape}")
    if w.ndim != 4:
        raise ValueError(f"conv weight must be OIKK, got shape {w.shape}")
    if w.shape[2] != w.shape[3]:
        raise ValueError(f"conv kernel must be square, got {w.shape[2]}x{w.shape[3]}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(
            f"input has {x.shape[1]} channels but the kernel expects {w.shape[1]}"
        )
    if stride < 1 or padding < 0:
        raise ValueError(f"invalid stride={stride} / padding={padding}")
    k = w.shape[2]
    oh = conv_output_size(x.shape[2], k, stride, padding)
    ow = conv_output_size(x.shape[3], k, stride, padding)
    if oh < 1 or ow < 1:
        raise ValueError(
            f"kernel {k}x{k} with padding {padding} does not fit input {x.shape[2]}x{x.shape[3]}"
        )
    return oh, ow


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with zero padding."""
    oh, ow = _check_conv(x, w, stride, padding)
    n = x.shape[0]
    o, _, k, _ = w.shape
    cols = kernels.im2col(x.data, k, stride, padding)  # I*K*K, N*L
    wm = w.data.reshape(o, -1)
    out = wm @ cols
    if bias is not None:
        if bias.shape != (o,):
            raise ValueError(f"bias must have shape ({o},), got {bias.shape}")
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(o, n, oh, ow).transpose(1, 0, 2, 3))

    def bw(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, -1)
        dx = dw = db = None
        if x.requires_grad:
            dx = kernels.col2im(wm.T @ g2, x.shape, k, stride, padding)
        if w.requires_grad:
            dw = (g2 @ cols.T).reshape(w.shape)
        if bias is not None and bias.requires_grad:
            db = g2.sum(axis=1)
        return dx, dw, db

    parents = (x, w) if bias is None else (x, w, bias)
    return _result(out, parents, bw, "conv2d")


def unfold(x: Tensor, k: int, stride: int = 1, padding: int = 0) -> Tensor:
    """Sliding k x k windows as an (N, C, k*k, L) tensor."""
    n, c, h, w = x.shape
    if conv_output_size(h, k, stride, padding) < 1 or conv_output_size(w, k, stride, padding) < 1:
        raise ValueError(f"window {k}x{k} does not fit input {h}x{w}")
    cols = kernels.im2col(x.data, k, stride, padding)
    out = np.ascontiguousarray(cols.reshape(c, k * k, n, -1).transpose(2, 0, 1, 3))

    def bw(g):
        g2 = np.ascontiguousarray(g.transpose(1, 2, 0, 3)).reshape(c * k * k, -1)
        return (kernels.col2im(g2, x.shape, k, stride, padding),)

    return _result(out, (x,), bw, "unfold")


def center_sample(x: Tensor, k: int, stride: int = 1, padding: int = 0) -> Tensor:
    """Pixel under the centre of every k x k window of a zero-padded conv."""
    n, c, h, w = x.shape
    oh = conv_output_size(h, k, stride, padding)
    ow = conv_output_size(w, k, stride, padding)
    shift = padding - (k - 1) // 2  # padding seen by a 1x1 window at the centre
    pad = max(shift, 0)
    start = max(-shift, 0)
    rows = slice(start, start + stride * (oh - 1) + 1, stride)
    cols = slice(start, start + stride * (ow - 1) + 1, stride)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.ascontiguousarray(xp[:, :, rows, cols])

    def bw(g):
        dxp = np.zeros_like(xp)
        dxp[:, :, rows, cols] = g
        return (dxp[:, :, pad:pad + h, pad:pad + w],)

    return _result(out, (x,), bw, "center_sample")


def maxpool2d(x: Tensor, k: int = 2, stride: int = 2) -> Tensor:
    if x.ndim != 4:
        raise ValueError(f"maxpool input must be NCHW, got shape {x.shape}")
    h, w = x.shape[2:]
    if k == stride and (h % stride or w % stride):
        raise ValueError(f"spatial size {h}x{w} is not divisible by stride {stride}")
    if h < k or w < k:
        raise ValueError(f"pool window {k} larger than input {h}x{w}")
    out, idx = kernels.maxpool_forward(x.data, k, stride)
    return _result(out, (x,), lambda g: (kernels.maxpool_backward(g, idx, x.shape),), "maxpool2d")


@lru_cache(maxsize=128)
def _resize_matrix(src: int, dst: int, mode: str) -> np.ndarray:
    m = np.zeros((dst, src))
    scale = src / dst
    if mode == "nearest":
        idx = np.minimum(np.floor(np.arange(dst) * scale).astype(int), src - 1)
        m[np.arange(dst), idx] = 1.0
        return m
    if mode != "bilinear":
        raise ValueError(f"unknown resize mode {mode!r}")
    # align_corners=False: pixel centres at (i + 0.5)
    pos = np.maximum((np.arange(dst) + 0.5) * scale - 0.5, 0.0)
    lo = np.minimum(np.floor(pos).astype(int), src - 1)
    hi = np.minimum(lo + 1, src - 1)
    frac = pos - lo
    np.add.at(m, (np.arange(dst), lo), 1.0 - frac)
    np.add.at(m, (np.arange(dst), hi), frac)
    return m


def resize(x: Tensor, out_h: int, out_w: int, mode: str = "bilinear") -> Tensor:
    if x.ndim != 4:
        raise ValueError(f"resize input must be NCHW, got shape {x.shape}")
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be positive, got {out_h}x{out_w}")
    h, w = x.shape[2:]
    if (h, w) == (out_h, out_w):
        return _result(x.data.copy(), (x,), lambda g: (g,), "resize")
    ry = _resize_matrix(h, out_h, mode).astype(x.dtype)
    rx = _resize_matrix(w, out_w, mode).astype(x.dtype)
    out = np.matmul(np.matmul(ry, x.data), rx.T)

    def bw(g):
        return (np.matmul(np.matmul(ry.T, g), rx),)

    return _result(out, (x,), bw, "resize")


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over N, H, W.

    In training mode the running statistics are updated in place (the
    running variance uses the unbiased estimate).
    """
    if x.ndim != 4:
        raise ValueError(f"batchnorm input must be NCHW, got shape {x.shape}")
    n, c, h, w = x.shape
    if n == 0:
        raise ValueError("batchnorm needs a non-empty batch")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"gamma/beta must have shape ({c},)")
    axes = (0, 2, 3)
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        count = n * h * w
        unbiased = var * count / (count - 1) if count > 1 else var
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mu, var = running_mean, running_var
        count = n * h * w
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.astype(x.dtype)[None, :, None, None]) * inv_std[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def bw(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gamma.data[None, :, None, None]
        if training:
            dx = (
                inv_std[None, :, None, None]
                / count
                * (
                    count * dxhat
                    - dxhat.sum(axis=axes)[None, :, None, None]
                    - xhat * (dxhat * xhat).sum(axis=axes)[None, :, None, None]
                )
            )
        else:
            dx = dxhat * inv_std[None, :, None, None]
        return dx, dgamma, dbeta

    return _result(out.astype(x.dtype), (x, gamma, beta), bw, "batchnorm2d")
