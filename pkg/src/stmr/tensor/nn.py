"""Parameters, modules and the layers the model is built from."""

from __future__ import annotations

import math

import numpy as np

from . import ops
from .core import Tensor, get_default_dtype


class Parameter(Tensor):
    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(np.asarray(data, dtype=get_default_dtype()), requires_grad=True)
        self.name = name


class Module:
    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def named_parameters(self, prefix: str = ""):
        for key, val in vars(self).items():
            yield from _walk_parameters(val, f"{prefix}{key}")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def assign_names(self) -> None:
        names = set()
        for name, p in self.named_parameters():
            if name in names:
                raise ValueError(f"duplicate parameter name {name}")
            names.add(name)
            p.name = name

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def modules(self):
        yield self
        for val in vars(self).values():
            yield from _walk_modules(val)

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def state_dict(self) -> dict:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
            p.data = arr.astype(p.dtype).copy()


def _walk_parameters(val, path):
    if isinstance(val, Parameter):
        yield path, val
    elif isinstance(val, Module):
        yield from val.named_parameters(path + ".")
    elif isinstance(val, (list, tuple)):
        for i, item in enumerate(val):
            yield from _walk_parameters(item, f"{path}.{i}")


def _walk_modules(val):
    if isinstance(val, Module):
        yield from val.modules()
    elif isinstance(val, (list, tuple)):
        for item in val:
            yield from _walk_modules(item)


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(uniform_init(rng, (n_in, n_out), n_in))
        self.bias = Parameter(uniform_init(rng, (n_out,), n_in)) if bias else None

    def forward(self, x):
        return ops.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, n: int, eps: float = 1e-5):
        self.gain = Parameter(np.ones(n))
        self.bias = Parameter(np.zeros(n))
        self.eps = eps

    def forward(self, x):
        return ops.layer_norm(x, self.gain, self.bias, self.eps)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator, stride: int = 1,
                 padding: int | None = None):
        fan_in = c_in * kernel * kernel
        self.weight = Parameter(uniform_init(rng, (c_out, c_in, kernel, kernel), fan_in))
        self.bias = Parameter(uniform_init(rng, (c_out,), fan_in))
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding

    def forward(self, x):
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class MLP(Module):
    """Two linear layers with GELU in between."""

    def __init__(self, n_in: int, n_hidden: int, n_out: int, rng: np.random.Generator):
        self.fc1 = Linear(n_in, n_hidden, rng)
        self.fc2 = Linear(n_hidden, n_out, rng)

    def forward(self, x):
        return self.fc2(ops.gelu(self.fc1(x)))
