"""Kernel backend selection.

The compiled extension is used when it imports; setting
``CDCNET_PURE_PYTHON=1`` forces the numpy fallback.
"""
import os

from . import _fallback

BACKEND = "python"
_impl = _fallback

if os.environ.get("CDCNET_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _fallback


def _contig(a):
    return a if a.flags.c_contiguous else a.copy(order="C")


def im2col(x, k, stride, pad):
    return _impl.im2col(_contig(x), k, stride, pad)


def col2im(cols, shape, k, stride, pad):
    return _impl.col2im(_contig(cols), tuple(shape), k, stride, pad)


def maxpool_forward(x, k, stride):
    return _impl.maxpool_forward(_contig(x), k, stride)


def maxpool_backward(g, idx, shape):
    return _impl.maxpool_backward(_contig(g), _contig(idx), tuple(shape))
