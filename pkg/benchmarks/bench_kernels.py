"""Compare the compiled kernels with the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Prints per-kernel best-of-N wall time for both backends and one training
step of the desk-scale model (S=64, C=16, batch 8) under each.
"""
import argparse
import timeit

import numpy as np

from cdcnet import _fallback, kernels
from cdcnet.losses import overall_loss
from cdcnet.models import ModelConfig, SingleModalCDCN
from cdcnet.tensor import Tensor

try:
    from cdcnet import _kernels
except ImportError:
    _kernels = None


def best(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def kernel_cases(rng):
    x = rng.normal(size=(8, 32, 32, 32)).astype(np.float32)
    cols = kernels.im2col(x, 3, 1, 1)
    pooled, idx = kernels.maxpool_forward(x, 2, 2)
    return {
        "im2col 8x32x32x32 k3": lambda m: m.im2col(x, 3, 1, 1),
        "col2im 8x32x32x32 k3": lambda m: m.col2im(cols, x.shape, 3, 1, 1),
        "maxpool fwd 2x2": lambda m: m.maxpool_forward(x, 2, 2),
        "maxpool bwd 2x2": lambda m: m.maxpool_backward(pooled, idx, x.shape),
    }


def train_step(model, x, gt):
    loss, _ = overall_loss(model({"rgb": x}), gt)
    model.zero_grad()
    loss.backward()


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    backends = {"numpy": _fallback}
    if _kernels is not None:
        backends["cython"] = _kernels
    else:
        print("compiled extension not built; timing the numpy fallback only")

    print(f"{'case':<28}" + "".join(f"{b:>12}" for b in backends) + ("     speedup" if len(backends) > 1 else ""))
    for name, fn in kernel_cases(rng).items():
        times = [best(lambda m=m: fn(m), args.repeat) for m in backends.values()]
        row = f"{name:<28}" + "".join(f"{1e3 * t:>10.2f}ms" for t in times)
        if len(times) > 1:
            row += f"{times[0] / times[1]:>11.1f}x"
        print(row)

    model = SingleModalCDCN(ModelConfig(init_channels=16, input_size=64))
    x = Tensor(rng.uniform(size=(8, 3, 64, 64)).astype(np.float32))
    gt = Tensor((rng.uniform(size=(8, 8, 8)) > 0.5).astype(np.float32))
    saved = kernels._impl
    times = []
    try:
        for impl in backends.values():
            kernels._impl = impl
            times.append(best(lambda: train_step(model, x, gt), max(2, args.repeat // 2)))
    finally:
        kernels._impl = saved
    row = f"{'train step S64 C16 b8':<28}" + "".join(f"{1e3 * t:>10.2f}ms" for t in times)
    if len(times) > 1:
        row += f"{times[0] / times[1]:>11.1f}x"
    print(row)


if __name__ == "__main__":
    main()
