"""Pure numpy versions of the sliding-window kernels in ``_kernels.pyx``."""
import numpy as np


def _out_size(h, w, k, stride, pad):
    return (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1


def im2col(x, k, stride, pad):
    n, c, h, w = x.shape
    oh, ow = _out_size(h, w, k, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, c, k, k, oh, ow), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return np.ascontiguousarray(cols.transpose(1, 2, 3, 0, 4, 5)).reshape(c * k * k, n * oh * ow)


def col2im(cols, shape, k, stride, pad):
    n, c, h, w = shape
    oh, ow = _out_size(h, w, k, stride, pad)
    cols = cols.reshape(c, k, k, n, oh, ow).transpose(3, 0, 1, 2, 4, 5)
    # extra (stride - 1) margin keeps the strided slices in range
    xp = np.zeros((n, c, h + 2 * pad + stride - 1, w + 2 * pad + stride - 1), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols[:, :, i, j]
    return np.ascontiguousarray(xp[:, :, pad:pad + h, pad:pad + w])


def maxpool_forward(x, k, stride):
    n, c, h, w = x.shape
    oh, ow = (h - k) // stride + 1, (w - k) // stride + 1
    windows = np.empty((n, c, oh, ow, k * k), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            windows[..., i * k + j] = x[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    # argmax returns the first occurrence, matching the compiled tie rule
    local = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, local[..., None], axis=-1)[..., 0]
    rows = np.arange(oh)[:, None] * stride + local // k
    cols = np.arange(ow)[None, :] * stride + local % k
    return out, (rows * w + cols).astype(np.int64)


def maxpool_backward(g, idx, shape):
    n, c, h, w = shape
    dx = np.zeros((n * c, h * w), dtype=g.dtype)
    flat = idx.reshape(n * c, -1)
    np.add.at(dx, (np.arange(n * c)[:, None], flat), g.reshape(n * c, -1))
    return dx.reshape(shape)
