"""Minimal module system: parameter registration, train/eval mode, Euclidean layers."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import autograd as ag
from .autograd import Parameter, Tensor


def uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    """``U(-sigma, sigma)`` with ``sigma = sqrt(1 / fan_in)``."""
    sigma = np.sqrt(1.0 / max(fan_in, 1))
    return rng.uniform(-sigma, sigma, size=shape).astype(dtype)


class Module:
    """Base class. Attributes holding Parameters, Modules, or lists/dicts of
    Modules are discovered automatically; numpy buffers live in ``self.buffers``."""

    def __init__(self) -> None:
        self.training = True
        self.buffers: dict[str, np.ndarray] = {}

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if name == "buffers":
                continue
            if isinstance(value, (Parameter, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, v in enumerate(value):
                    if isinstance(v, (Parameter, Module)):
                        yield f"{name}.{i}", v
            elif isinstance(value, dict):
                for k, v in value.items():
                    if isinstance(v, (Parameter, Module)):
                        yield f"{name}.{k}", v

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, child in self._children():
            full = f"{prefix}{name}"
            if isinstance(child, Parameter):
                yield full, child
            else:
                yield from child.named_parameters(full + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray, "Module", str]]:
        for key, arr in self.buffers.items():
            yield f"{prefix}{key}", arr, self, key
        for name, child in self._children():
            if isinstance(child, Module):
                yield from child.named_buffers(f"{prefix}{name}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self._children():
            if isinstance(child, Module):
                yield from child.modules()

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self._children():
            if isinstance(child, Module):
                yield from child.named_modules(f"{prefix}{name}.")

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng, bias: bool = True, dtype=np.float64, name: str = ""):
        super().__init__()
        self.weight = Parameter(uniform_init(rng, (out_features, in_features), in_features, dtype), name=f"{name}weight")
        self.bias = Parameter(np.zeros(out_features, dtype=dtype), name=f"{name}bias") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ag.matmul(x, ag.transpose(self.weight, (1, 0)))
        return y + self.bias if self.bias is not None else y


class BatchNorm(Module):
    """Batch normalization over every axis except the last (feature) axis."""

    def __init__(self, features: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float64, name: str = ""):
        super().__init__()
        self.gamma = Parameter(np.ones(features, dtype=dtype), name=f"{name}gamma")
        self.beta = Parameter(np.zeros(features, dtype=dtype), name=f"{name}beta")
        self.momentum = momentum
        self.eps = eps
        self.buffers["running_mean"] = np.zeros(features, dtype=dtype)
        self.buffers["running_var"] = np.ones(features, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        axes = tuple(range(x.ndim - 1))
        if self.training:
            mu = ag.mean(x, axis=axes, keepdims=True)
            centered = x - mu
            var = ag.mean(ag.square(centered), axis=axes, keepdims=True)
            n = int(np.prod([x.shape[a] for a in axes]))
            m = self.momentum
            dt = self.buffers["running_mean"].dtype
            self.buffers["running_mean"] = ((1 - m) * self.buffers["running_mean"] + m * mu.data.reshape(-1)).astype(dt)
            unbiased = var.data.reshape(-1) * (n / max(n - 1, 1))
            self.buffers["running_var"] = ((1 - m) * self.buffers["running_var"] + m * unbiased).astype(dt)
            xhat = centered / ag.sqrt(var + self.eps)
        else:
            rm = self.buffers["running_mean"]
            rv = self.buffers["running_var"]
            xhat = (x - rm) * (1.0 / np.sqrt(rv + self.eps)).astype(rm.dtype)
        return xhat * self.gamma + self.beta
