"""Pixel-wise supervision: mean squared error and contrastive depth loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, as_tensor, conv2d, square

# row-major neighbour offsets, one directional kernel each
NEIGHBOURS = ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1))


def cdl_kernel_bank(dtype=np.float64) -> np.ndarray:
    """Eight 3x3 kernels: -1 at the centre, +1 at one neighbour."""
    bank = np.zeros((len(NEIGHBOURS), 1, 3, 3), dtype=dtype)
    for n, (dy, dx) in enumerate(NEIGHBOURS):
        bank[n, 0, 1, 1] = -1.0
        bank[n, 0, 1 + dy, 1 + dx] = 1.0
    return bank


@dataclass(frozen=True)
class LossReport:
    mse: float
    cdl: float
    overall: float


def _as_batch(mask: Tensor) -> Tensor:
    if mask.ndim == 2:
        return mask.reshape(1, 1, *mask.shape)
    if mask.ndim == 3:
        return mask.reshape(mask.shape[0], 1, *mask.shape[1:])
    if mask.ndim == 4 and mask.shape[1] == 1:
        return mask
    raise ValueError(f"expected an H x W mask or a batch of them, got shape {mask.shape}")


def _check_pair(pred: Tensor, gt: Tensor) -> tuple[Tensor, Tensor]:
    pred, gt = as_tensor(pred), as_tensor(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    return _as_batch(pred), _as_batch(gt)


def mse_loss(pred, gt) -> Tensor:
    """Mean squared error over pixels (and over the batch)."""
    pred, gt = _check_pair(pred, gt)
    return square(pred - gt).mean()


def cdl_loss(pred, gt, bank: np.ndarray | None = None) -> Tensor:
    """Contrastive depth loss with zero-padded, same-size kernel responses.

    Normalised by H * W * N per sample and averaged over the batch.
    """
    pred, gt = _check_pair(pred, gt)
    if bank is None:
        bank = cdl_kernel_bank(pred.dtype)
    kernels = Tensor(np.asarray(bank, dtype=pred.dtype))
    # linearity: K*pred - K*gt == K*(pred - gt)
    diff = conv2d(pred - gt, kernels, None, 1, 1)
    return square(diff).mean()


def overall_loss(pred, gt) -> tuple[Tensor, LossReport]:
    """Return the differentiable total and a float breakdown."""
    mse = mse_loss(pred, gt)
    cdl = cdl_loss(pred, gt)
    total = mse + cdl
    m, c = mse.item(), cdl.item()
    return total, LossReport(m, c, m + c)
