"""Vanilla, central difference, and theta-blended convolution.

``cdc`` evaluates the blend term by term and serves as the reference;
``cdc_decomposed`` is the production path used by the networks.  It relies on

    sum_n w_n (x(p0 + p_n) - x(p0)) = conv(x, w)(p0) - x(p0) * sum_n w_n

so the blend collapses to one dense convolution minus ``theta`` times the
centre-pixel map convolved with the per-filter kernel sums.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, center_sample, conv2d, unfold


@dataclass
class CdcLayer:
    weight: Tensor
    bias: Tensor | None = None
    theta: float = 0.7
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError(f"theta must lie in [0, 1], got {self.theta}")
        if self.weight.ndim != 4 or self.weight.shape[2] != self.weight.shape[3]:
            raise ValueError(f"weight must be O x I x K x K, got {self.weight.shape}")
        if self.weight.shape[2] % 2 == 0:
            raise ValueError(f"kernel size must be odd to have a centre, got {self.weight.shape[2]}")

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]


def vanilla_conv(x: Tensor, layer: CdcLayer) -> Tensor:
    return conv2d(x, layer.weight, layer.bias, layer.stride, layer.padding)


def _add_bias(y: Tensor, bias: Tensor | None) -> Tensor:
    if bias is None:
        return y
    return y + bias.reshape(1, -1, 1, 1)


def _central_difference(x: Tensor, layer: CdcLayer) -> Tensor:
    k = layer.kernel_size
    n = x.shape[0]
    o = layer.weight.shape[0]
    windows = unfold(x, k, layer.stride, layer.padding)  # N, I, K*K, L
    centre = windows[:, :, (k * k) // 2 : (k * k) // 2 + 1, :]
    diffs = (windows - centre).reshape(n, -1, windows.shape[3])
    out = layer.weight.reshape(o, -1) @ diffs
    oh = (x.shape[2] + 2 * layer.padding - k) // layer.stride + 1
    return out.reshape(n, o, oh, -1)


def central_diff_conv(x: Tensor, layer: CdcLayer) -> Tensor:
    """Weighted sum of centre-oriented differences ``x(p0 + p_n) - x(p0)``."""
    return _add_bias(_central_difference(x, layer), layer.bias)


def cdc(x: Tensor, layer: CdcLayer) -> Tensor:
    theta = layer.theta
    plain = conv2d(x, layer.weight, None, layer.stride, layer.padding)
    y = _central_difference(x, layer) * theta + plain * (1.0 - theta)
    return _add_bias(y, layer.bias)


def cdc_decomposed(x: Tensor, layer: CdcLayer) -> Tensor:
    out = conv2d(x, layer.weight, layer.bias, layer.stride, layer.padding)
    if layer.theta == 0.0:
        return out
    k = layer.kernel_size
    kernel_sum = layer.weight.sum(axis=(2, 3), keepdims=True)
    centre = center_sample(x, k, layer.stride, layer.padding)
    return out - conv2d(centre, kernel_sum) * layer.theta


def random_layer(
    rng: np.random.Generator,
    in_ch: int,
    out_ch: int,
    k: int = 3,
    theta: float = 0.7,
    stride: int = 1,
    padding: int = 1,
    bias: bool = False,
    dtype=np.float64,
) -> CdcLayer:
    """Layer with standard-normal weights, handy for checks and benchmarks."""
    w = Tensor(rng.standard_normal((out_ch, in_ch, k, k)).astype(dtype))
    b = Tensor(rng.standard_normal(out_ch).astype(dtype)) if bias else None
    return CdcLayer(w, b, theta, stride, padding)
