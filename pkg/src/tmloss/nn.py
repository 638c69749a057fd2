"""Parameter containers and the standard layers built on the autodiff engine."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from tmloss.autodiff import Tensor, functional as F, get_default_dtype


def uniform_fan_in(rng: np.random.Generator, shape: tuple, fan_in: int, dtype=None) -> Tensor:
    """U(-1/sqrt(fan_in), 1/sqrt(fan_in)) trainable tensor."""
    bound = 1.0 / math.sqrt(fan_in)
    dtype = dtype or get_default_dtype()
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def constant(shape: tuple, value: float, dtype=None) -> Tensor:
    dtype = dtype or get_default_dtype()
    return Tensor(np.full(shape, value, dtype=dtype), requires_grad=True)


class Module:
    """Holds trainable tensors, state buffers and child modules.

    Parameters are discovered from attributes: a ``Tensor`` with
    ``requires_grad`` is a parameter, a ``Module`` (or list of modules) is a
    child. Names are dotted attribute paths in definition order, which keeps
    checkpoints stable.
    """

    training: bool = True

    def __init__(self):
        self.training = True
        self.buffers: dict[str, np.ndarray] = {}

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, buf in self.buffers.items():
            yield prefix + name, buf
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        missing = (set(own) | set(bufs)) - set(state)
        if missing:
            raise KeyError(f"state is missing entries: {sorted(missing)[:5]}")
        for name, p in own.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ValueError(f"{name}: stored shape {value.shape} != model shape {p.shape}")
            p.data = value.astype(p.dtype).copy()
        for name, buf in bufs.items():
            buf[...] = state[name]

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.weight = uniform_fan_in(rng, (out_features, in_features), in_features)
        self.bias = uniform_fan_in(rng, (out_features,), in_features) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, bias: bool = False):
        super().__init__()
        fan_in = in_channels * kernel_size * kernel_size
        self.stride = stride
        self.padding = padding
        self.weight = uniform_fan_in(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in)
        self.bias = uniform_fan_in(rng, (out_channels,), fan_in) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class BatchNorm(Module):
    """Batch normalisation over channel axis 1 (works for 2-D and 4-D inputs)."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        dtype = get_default_dtype()
        self.momentum = momentum
        self.eps = eps
        self.gain = constant((channels,), 1.0)
        self.bias = constant((channels,), 0.0)
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return F.batchnorm(x, self.gain, self.bias, self.buffers["running_mean"], self.buffers["running_var"],
                           training=self.training, momentum=self.momentum, eps=self.eps)


class PReLU(Module):
    def __init__(self, channels: int, init: float = 0.25, axis: int = 1):
        super().__init__()
        self.axis = axis
        self.slope = constant((channels,), init)

    def forward(self, x: Tensor) -> Tensor:
        return F.prelu(x, self.slope, axis=self.axis)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gain = constant((dim,), 1.0)
        self.bias = constant((dim,), 0.0)

    def forward(self, x: Tensor) -> Tensor:
        return F.layernorm(x, self.gain, self.bias, self.eps)


def count_parameters(module: Module) -> int:
    return int(sum(p.size for p in module.parameters()))

