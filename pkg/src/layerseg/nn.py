"""Minimal module system: parameter registry, train/eval mode, basic layers."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import BatchNormState, Tensor


class Module:
    def __init__(self) -> None:
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self._modules[name] = value
        elif isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value

    def add_module(self, name: str, module: "Module") -> None:
        self._modules[name] = module

    def modules(self) -> Iterator["Module"]:
        yield self
        for child in self._modules.values():
            yield from child.modules()

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {prefix + k: v for k, v in self._params.items()}
        for name, child in self._modules.items():
            out.update(child.named_parameters(f"{prefix}{name}."))
        return out

    def named_buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {prefix + k: v for k, v in self._buffers.items()}
        for name, child in self._modules.items():
            out.update(child.named_buffers(f"{prefix}{name}."))
        return out

    def parameter_count(self) -> int:
        return sum(p.size for p in self.named_parameters().values())

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.named_parameters().values():
            p.requires_grad = flag

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Parameters and buffers by name (live arrays, not copies)."""
        out = {k: p.data for k, p in self.named_parameters().items()}
        out.update(self.named_buffers())
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        """Copy arrays into parameters and buffers in place."""
        own = self.state_arrays()
        missing = sorted(set(own) - set(arrays))
        if missing:
            raise KeyError(f"missing entries in state: {missing[:5]}")
        for k, dst in own.items():
            src = np.asarray(arrays[k])
            if src.shape != dst.shape:
                raise ValueError(f"{k}: shape {src.shape} does not match {dst.shape}")
            dst[...] = src

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def glorot_uniform(shape, fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class Conv2d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel: int,
        stride: int = 1,
        padding=0,
        bias: bool = True,
        spectral: bool = False,
        n_power_iter: int = 1,
        rng: np.random.Generator | None = None,
    ):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        k2 = kernel * kernel
        self.stride = stride
        self.padding = padding
        self.spectral = spectral
        self.n_power_iter = n_power_iter
        self.weight = Tensor(
            glorot_uniform((out_channels, in_channels, kernel, kernel), in_channels * k2, out_channels * k2, rng),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True) if bias else None
        if spectral:
            u = rng.normal(size=out_channels)
            self.u = (u / np.linalg.norm(u)).astype(T.get_dtype())
            self.register_buffer("u", self.u)

    def effective_weight(self) -> Tensor:
        if not self.spectral:
            return self.weight
        return T.spectral_normalize(self.weight, self.u, self.n_power_iter, update=self.training)

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.effective_weight(), self.stride, self.padding, self.bias)


class ConvTranspose2d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel: int,
        stride: int = 1,
        padding=0,
        bias: bool = True,
        rng: np.random.Generator | None = None,
    ):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        k2 = kernel * kernel
        self.stride = stride
        self.padding = padding
        self.weight = Tensor(
            glorot_uniform((in_channels, out_channels, kernel, kernel), in_channels * k2, out_channels * k2, rng),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d_transpose(x, self.weight, self.stride, self.padding, self.bias)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5):
        super().__init__()
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.state = BatchNormState.create(channels, momentum, eps)
        self.register_buffer("running_mean", self.state.running_mean)
        self.register_buffer("running_var", self.state.running_var)

    def forward(self, x: Tensor) -> Tensor:
        return T.batch_norm(x, self.gamma, self.beta, self.state, "train" if self.training else "eval")
