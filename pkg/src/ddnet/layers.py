"""Parameter-owning building blocks."""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import ops
from .ops import BatchNormState, ConvSpec
from .tensor import Parameter, Tensor


class Module:
    """Walks its attributes (in assignment order) to find parameters."""

    training = True

    def _children(self):
        for key, val in vars(self).items():
            if isinstance(val, (Parameter, Module, BatchNormState)):
                yield key, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, (Parameter, Module, BatchNormState)):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple]:
        for key, val in self._children():
            path = prefix + key
            if isinstance(val, Parameter):
                yield path, val
            elif isinstance(val, BatchNormState):
                yield path + ".weight", val.gamma
                yield path + ".bias", val.beta
            else:
                yield from val.named_parameters(path + ".")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple]:
        for key, val in self._children():
            path = prefix + key
            if isinstance(val, BatchNormState):
                yield path + ".running_mean", val.running_mean
                yield path + ".running_var", val.running_var
            elif isinstance(val, Module):
                yield from val.named_buffers(path + ".")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, val in self._children():
            if isinstance(val, Module):
                yield from val.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


def he_normal(rng: np.random.Generator, dims: tuple, fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(dims) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv2d(Module):
    def __init__(self, spec: ConvSpec, rng: Optional[np.random.Generator] = None, dtype=np.float32,
                 zero_init: bool = False):
        self.spec = spec
        fan_in = spec.in_channels * spec.kernel[0] * spec.kernel[1]
        if zero_init:
            self.weight = Parameter(np.zeros(spec.weight_dims, dtype=dtype))
        else:
            self.weight = Parameter(he_normal(rng, spec.weight_dims, fan_in, dtype))
        self.bias = Parameter(np.zeros((1, spec.out_channels, 1, 1), dtype=dtype)) if spec.has_bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.spec)


class TransposedConv2d(Module):
    def __init__(self, spec: ConvSpec, rng: np.random.Generator, dtype=np.float32):
        self.spec = spec
        # each output pixel receives about in*k*k/stride^2 contributions
        fan_in = spec.in_channels * spec.kernel[0] * spec.kernel[1] // (spec.stride[0] * spec.stride[1])
        self.weight = Parameter(he_normal(rng, spec.transposed_weight_dims, max(fan_in, 1), dtype))
        self.bias = Parameter(np.zeros((1, spec.out_channels, 1, 1), dtype=dtype)) if spec.has_bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.transposed_conv2d(x, self.weight, self.spec, self.bias)


class BatchNorm2d(Module):
    def __init__(self, channels: int, dtype=np.float32):
        self.state = BatchNormState(channels, dtype=dtype)

    def named_parameters(self, prefix: str = ""):
        yield prefix + "weight", self.state.gamma
        yield prefix + "bias", self.state.beta

    def named_buffers(self, prefix: str = ""):
        yield prefix + "running_mean", self.state.running_mean
        yield prefix + "running_var", self.state.running_var

    def __call__(self, x: Tensor) -> Tensor:
        return ops.batch_norm(x, self.state, "train" if self.training else "eval")


def set_names(module: Module, prefix: str = "") -> None:
    for name, p in module.named_parameters(prefix):
        p.name = name


def find(module: Module, name: str) -> Optional[Parameter]:
    for n, p in module.named_parameters():
        if n == name:
            return p
    return None
