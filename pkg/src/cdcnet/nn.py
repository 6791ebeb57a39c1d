"""Module container, parameter initialisation, and the basic layers."""
from __future__ import annotations

from collections.abc import Iterator

import numpy as np

from .cdc import CdcLayer, cdc_decomposed
from .tensor import Tensor, batchnorm2d, conv2d


class Module:
    """Minimal parameter container.

    Parameters are ``Tensor`` attributes with ``requires_grad``; buffers are
    numpy arrays registered in ``self._buffers``.  Child modules may sit in
    attributes, lists, or dicts.  Names follow attribute insertion order.
    """

    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    yield f"{name}.{i}", item
            elif isinstance(value, dict):
                for key, item in value.items():
                    yield f"{name}.{key}", item
            else:
                yield name, value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in self._children():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, buf in getattr(self, "_buffers", {}).items():
            yield prefix + name, buf
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")

    def modules(self) -> Iterator[Module]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True) -> Module:
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> Module:
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def astype(self, dtype) -> Module:
        """Cast parameters and buffers in place."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for m in self.modules():
            bufs = getattr(m, "_buffers", None)
            if bufs:
                for k in bufs:
                    bufs[k] = bufs[k].astype(dtype)
        return self

    @property
    def dtype(self):
        return self.parameters()[0].dtype

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = dict(self.named_parameters())
        buffers = {}
        for m_name, m in self._named_modules():
            for k in getattr(m, "_buffers", {}):
                buffers[m_name + k] = (m, k)
        missing = (set(expected) | set(buffers)) - set(state)
        unexpected = set(state) - set(expected) - set(buffers)
        if missing or unexpected:
            raise ValueError(
                f"state mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}"
            )
        for name, p in expected.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: expected shape {p.shape}, got {arr.shape}")
            p.data = arr.astype(p.dtype).copy()
        for name, (m, k) in buffers.items():
            arr = np.asarray(state[name])
            if arr.shape != m._buffers[k].shape:
                raise ValueError(f"{name}: expected shape {m._buffers[k].shape}, got {arr.shape}")
            m._buffers[k] = arr.astype(m._buffers[k].dtype).copy()

    def _named_modules(self, prefix: str = "") -> Iterator[tuple[str, Module]]:
        yield prefix, self
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value._named_modules(f"{prefix}{name}.")


def uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


class CdcConv2d(Module):
    """Convolution layer evaluated with the decomposed CDC path."""

    def __init__(self, rng, in_ch, out_ch, k=3, theta=0.7, stride=1, padding=None, bias=False):
        fan_in = in_ch * k * k
        self.weight = uniform_init(rng, (out_ch, in_ch, k, k), fan_in)
        self.bias = uniform_init(rng, (out_ch,), fan_in) if bias else None
        self.theta = theta
        self.stride = stride
        self.padding = k // 2 if padding is None else padding

    @property
    def layer(self) -> CdcLayer:
        return CdcLayer(self.weight, self.bias, self.theta, self.stride, self.padding)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.weight.shape[1]:
            raise ValueError(
                f"expected {self.weight.shape[1]} input channels, got {x.shape[1]}"
            )
        return cdc_decomposed(x, self.layer)


class Conv2d(Module):
    def __init__(self, rng, in_ch, out_ch, k=3, padding=None, bias=False):
        fan_in = in_ch * k * k
        self.weight = uniform_init(rng, (out_ch, in_ch, k, k), fan_in)
        self.bias = uniform_init(rng, (out_ch,), fan_in) if bias else None
        self.padding = k // 2 if padding is None else padding

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, 1, self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(channels, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True)
        self._buffers = {
            "running_mean": np.zeros(channels, dtype=np.float32),
            "running_var": np.ones(channels, dtype=np.float32),
        }
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return batchnorm2d(
            x,
            self.gamma,
            self.beta,
            self._buffers["running_mean"],
            self._buffers["running_var"],
            self.training,
            self.momentum,
            self.eps,
        )
