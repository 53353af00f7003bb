"""Parameter containers: a small Module base plus conv, linear and batch-norm layers."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Parameter(Tensor):
    """A trainable leaf tensor. ``decay`` marks it for weight decay."""

    __slots__ = ("decay",)

    def __init__(self, data, decay: bool = False):
        super().__init__(np.asarray(data, dtype=np.float32), requires_grad=True)
        self.decay = decay


class Module:
    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Module):
                yield from value.named_buffers(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{full}.{i}.")
        for name in getattr(self, "_buffers", ()):
            yield f"{prefix}{name}", getattr(self, name)

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, stride: int = 1, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        std = np.sqrt(2.0 / (k * k * c_in))
        self.weight = Parameter(rng.normal(0.0, std, (c_out, c_in, k, k)), decay=True)
        self.stride = stride
        self.pad = k // 2

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.stride, self.pad)

    def macs(self, h_out: int, w_out: int) -> int:
        c_out, c_in, k, _ = self.weight.shape
        return c_out * c_in * k * k * h_out * w_out


class DepthwiseConv2d(Module):
    def __init__(self, c: int, k: int = 3, stride: int = 1, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        std = np.sqrt(2.0 / (k * k))
        self.weight = Parameter(rng.normal(0.0, std, (c, 1, k, k)), decay=True)
        self.stride = stride
        self.pad = k // 2

    def __call__(self, x: Tensor) -> Tensor:
        return ad.depthwise_conv2d(x, self.weight, self.stride, self.pad)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng=None, bias: bool = True):
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = 1.0 / np.sqrt(n_in)
        self.weight = Parameter(rng.uniform(-bound, bound, (n_out, n_in)), decay=True)
        self.bias = Parameter(np.zeros(n_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.weight, self.bias)


class BatchNorm(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, c: int, zero_init: bool = False):
        self.weight = Parameter(np.zeros(c) if zero_init else np.ones(c))
        self.bias = Parameter(np.zeros(c))
        self.running_mean = np.zeros(c, dtype=np.float32)
        self.running_var = np.ones(c, dtype=np.float32)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.batch_norm(x, self.weight, self.bias, self.running_mean, self.running_var,
                             training=self.training)
