"""Central finite-difference audit of analytic gradients."""
from __future__ import annotations

from collections.abc import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


class NonDeterministicError(ValueError):
    """Raised when two forward passes of the checked function disagree."""


def grad_check(
    f: Callable[..., Tensor],
    x: Tensor | Sequence[Tensor],
    step: float = 1e-3,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Largest relative error between backprop and central differences.

    ``f`` is called as ``f(*xs)`` and must return a scalar tensor.  The
    inputs are perturbed in place, so ``f`` may also close over them and
    ignore its arguments.  With ``max_coords`` only a random subsample of
    coordinates (across all inputs) is probed.

    The relative error of one coordinate is
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.  A
    coordinate that disagrees is re-probed at ``step / 100`` and then
    ``step / 1000``, keeping the smallest error: a relu or max kink inside a
    wider bracket then does not read as a wrong gradient, while a genuine
    error persists at every step.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        t.requires_grad = True
        t.grad = None

    with no_grad():
        first = np.array(f(*xs).data, copy=True)
        second = np.array(f(*xs).data, copy=True)
    if first.size != 1:
        raise ValueError(f"grad_check needs a scalar function, got shape {first.shape}")
    if not np.array_equal(first, second):
        raise NonDeterministicError(
            "two forward passes differ; freeze stateful layers before checking gradients"
        )

    loss = f(*xs)
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad for t in xs]

    coords = [(i, j) for i, t in enumerate(xs) for j in range(t.data.size)]
    if max_coords is not None and max_coords < len(coords):
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[k] for k in sorted(pick)]

    def numeric(flat, j, h):
        orig = flat[j]
        flat[j] = orig + h
        up = float(f(*xs).data)
        flat[j] = orig - h
        down = float(f(*xs).data)
        flat[j] = orig
        return (up - down) / (2.0 * h)

    def rel(a, n):
        return abs(a - n) / max(abs(a), abs(n), 1e-8)

    worst = 0.0
    with no_grad():
        for i, j in coords:
            flat = xs[i].data.reshape(-1)
            a = float(analytic[i].reshape(-1)[j])
            err = rel(a, numeric(flat, j, step))
            for shrink in (1e-2, 1e-3):
                if err <= 1e-7:
                    break
                err = min(err, rel(a, numeric(flat, j, step * shrink)))
            worst = max(worst, err)
    return worst
