"""Module containers and parameterised primitive layers."""

from __future__ import annotations

import math
from collections import OrderedDict
from typing import Iterator, Optional

import numpy as np

from .tensor import Tensor, TensorError, default_dtype, ops, profile


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


class Module:
    """Parameter container; children and parameters keep assignment order."""

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "_children", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def add_module(self, name: str, module: "Module") -> None:
        self._children[name] = module
        object.__setattr__(self, name, module)

    def __call__(self, *args, **kwargs):
        if profile.active():
            with profile.scope(getattr(self, "_scope_name", type(self).__name__)):
                return self.forward(*args, **kwargs)
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    # -- traversal -------------------------------------------------------
    def named_children(self) -> Iterator[tuple]:
        return iter(self._children.items())

    def named_modules(self, prefix: str = "") -> Iterator[tuple]:
        yield prefix, self
        for name, child in self._children.items():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple]:
        for name, p in self._params.items():
            yield (f"{prefix}.{name}" if prefix else name), p
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}.{name}" if prefix else name)

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple]:
        for name, b in self._buffers.items():
            yield (f"{prefix}.{name}" if prefix else name), b
        for name, child in self._children.items():
            yield from child.named_buffers(f"{prefix}.{name}" if prefix else name)

    def state_items(self) -> list:
        """(name, array, is_parameter) in canonical graph order."""
        items = []

        def walk(mod, prefix):
            for name, p in mod._params.items():
                items.append((f"{prefix}{name}", p.data, True))
            for name, b in mod._buffers.items():
                items.append((f"{prefix}{name}", b, False))
            for name, child in mod._children.items():
                walk(child, f"{prefix}{name}.")

        walk(self, "")
        return items

    def assign_scope_names(self) -> None:
        for name, mod in self.named_modules():
            object.__setattr__(mod, "_scope_name", name.split(".")[-1] if name else type(mod).__name__)

    def train(self, mode: bool = True) -> "Module":
        for _, m in self.named_modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def to(self, dtype) -> "Module":
        """Cast parameters and buffers in place to ``dtype``."""
        dt = np.dtype(dtype)
        for _, m in self.named_modules():
            for p in m._params.values():
                p.data = p.data.astype(dt)
                p.grad = None
            for name, b in list(m._buffers.items()):
                nb = b.astype(dt)
                m._buffers[name] = nb
                object.__setattr__(m, name, nb)
        return self

    def num_params(self) -> int:
        """Learned-scalar count from layer hyperparameters (closed form)."""
        return sum(child.num_params() for child in self._children.values()) + self._own_params()

    def _own_params(self) -> int:
        return 0


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=None) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype or default_dtype())


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, stride: int = 1, pad: Optional[int] = None,
                 bias: bool = False, rng: Optional[np.random.Generator] = None):
        super().__init__()
        if min(c_in, c_out, k, stride) < 1:
            raise TensorError(f"Conv2d: invalid c_in={c_in} c_out={c_out} k={k} stride={stride}")
        rng = rng or np.random.default_rng(0)
        self.c_in, self.c_out, self.k, self.stride = c_in, c_out, k, stride
        self.pad = k // 2 if pad is None else pad
        self.has_bias = bias
        self.weight = Parameter(kaiming_uniform(rng, (c_out, c_in, k, k), c_in * k * k))
        self.bias = Parameter(np.zeros(c_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.pad)

    def _own_params(self) -> int:
        return self.c_out * self.c_in * self.k * self.k + (self.c_out if self.has_bias else 0)


class BatchNorm2d(Module):
    def __init__(self, c: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.c, self.eps, self.momentum = c, eps, momentum
        self.gamma = Parameter(np.ones(c))
        self.beta = Parameter(np.zeros(c))
        self.register_buffer("running_mean", np.zeros(c, dtype=default_dtype()))
        self.register_buffer("running_var", np.ones(c, dtype=default_dtype()))

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.c:
            raise TensorError(f"BatchNorm2d: expected {self.c} channels, got input {x.shape}")
        return ops.batchnorm2d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                               self.training, self.eps, self.momentum)

    def _own_params(self) -> int:
        return 2 * self.c


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, bias: bool = True,
                 rng: Optional[np.random.Generator] = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.d_in, self.d_out, self.has_bias = d_in, d_out, bias
        self.weight = Parameter(kaiming_uniform(rng, (d_in, d_out), d_in))
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)

    def _own_params(self) -> int:
        return self.d_in * self.d_out + (self.d_out if self.has_bias else 0)


ACTIVATIONS = {
    "silu": ops.silu,
    "relu": ops.relu,
    "none": None,
}


def activate(x: Tensor, kind: str) -> Tensor:
    try:
        fn = ACTIVATIONS[kind]
    except KeyError:
        raise TensorError(f"unknown activation {kind!r}") from None
    return x if fn is None else fn(x)
