# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled sliding-window kernels.

im2col lays windows out as (C*K*K, N*OH*OW): one row per kernel tap, one
column per output pixel, batch-major.

Signatures and results match :mod:`cdcnet._fallback` exactly.
"""
import numpy as np
cimport numpy as cnp
from cython cimport floating

cnp.import_array()


def im2col(floating[:, :, :, ::1] x, int k, int stride, int pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - k) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((c * k * k, n * oh * ow), dtype=dtype)
    cdef floating[:, ::1] cols = out
    cdef Py_ssize_t b, ch, ki, kj, oi, oj, row, ii, jj
    with nogil:
        for b in range(n):
            for ch in range(c):
                for ki in range(k):
                    for kj in range(k):
                        row = (ch * k + ki) * k + kj
                        for oi in range(oh):
                            ii = oi * stride + ki - pad
                            if ii < 0 or ii >= h:
                                continue
                            for oj in range(ow):
                                jj = oj * stride + kj - pad
                                if jj >= 0 and jj < w:
                                    cols[row, (b * oh + oi) * ow + oj] = x[b, ch, ii, jj]
    return out


def col2im(floating[:, ::1] cols, tuple shape, int k, int stride, int pad):
    cdef Py_ssize_t n = shape[0], c = shape[1], h = shape[2], w = shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - k) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((n, c, h, w), dtype=dtype)
    cdef floating[:, :, :, ::1] x = out
    cdef Py_ssize_t b, ch, ki, kj, oi, oj, row, ii, jj
    with nogil:
        for b in range(n):
            for ch in range(c):
                for ki in range(k):
                    for kj in range(k):
                        row = (ch * k + ki) * k + kj
                        for oi in range(oh):
                            ii = oi * stride + ki - pad
                            if ii < 0 or ii >= h:
                                continue
                            for oj in range(ow):
                                jj = oj * stride + kj - pad
                                if jj >= 0 and jj < w:
                                    x[b, ch, ii, jj] += cols[row, (b * oh + oi) * ow + oj]
    return out


def maxpool_forward(floating[:, :, :, ::1] x, int k, int stride):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h - k) // stride + 1
    cdef Py_ssize_t ow = (w - k) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((n, c, oh, ow), dtype=dtype)
    arg = np.empty((n, c, oh, ow), dtype=np.int64)
    cdef floating[:, :, :, ::1] y = out
    cdef cnp.int64_t[:, :, :, ::1] idx = arg
    cdef Py_ssize_t b, ch, oi, oj, ki, kj, ii, jj, best_i
    cdef floating best, v
    with nogil:
        for b in range(n):
            for ch in range(c):
                for oi in range(oh):
                    for oj in range(ow):
                        ii = oi * stride
                        jj = oj * stride
                        best = x[b, ch, ii, jj]
                        best_i = ii * w + jj
                        for ki in range(k):
                            for kj in range(k):
                                v = x[b, ch, ii + ki, jj + kj]
                                # strict '>' keeps the first occurrence on ties
                                if v > best:
                                    best = v
                                    best_i = (ii + ki) * w + jj + kj
                        y[b, ch, oi, oj] = best
                        idx[b, ch, oi, oj] = best_i
    return out, arg


def maxpool_backward(floating[:, :, :, ::1] g, cnp.int64_t[:, :, :, ::1] idx, tuple shape):
    cdef Py_ssize_t n = shape[0], c = shape[1], h = shape[2], w = shape[3]
    cdef Py_ssize_t oh = g.shape[2], ow = g.shape[3]
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((n, c, h, w), dtype=dtype)
    cdef floating[:, :, :, ::1] dx = out
    cdef Py_ssize_t b, ch, oi, oj, p
    with nogil:
        for b in range(n):
            for ch in range(c):
                for oi in range(oh):
                    for oj in range(ow):
                        p = idx[b, ch, oi, oj]
                        dx[b, ch, p // w, p % w] += g[b, ch, oi, oj]
    return out
