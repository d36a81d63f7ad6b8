"""Module containers and parameterized layers."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import Tensor, get_default_dtype


class Parameter(Tensor):
    """A leaf tensor that always requires grad."""

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)

    def __repr__(self) -> str:
        return f"Parameter(shape={self.shape}, dtype={self.dtype})"


class Module:
    """Base class: attributes that are Parameters or Modules (or lists of them) are tracked."""

    training: bool = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, val in vars(self).items():
            if isinstance(val, (Parameter, Module)):
                yield name, val
            elif isinstance(val, (list, tuple)) and val and all(isinstance(v, Module) for v in val):
                for i, v in enumerate(val):
                    yield f"{name}.{i}", v

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, val in self._children():
            full = f"{prefix}{name}"
            if isinstance(val, Parameter):
                yield full, val
            else:
                yield from val.named_parameters(full + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for name, val in self._children():
            if isinstance(val, Module):
                yield from val.named_modules(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray | None]]:
        for mname, mod in self.named_modules(prefix):
            for bname, arr in mod._own_buffers():
                yield (f"{mname}.{bname}" if mname else bname), arr

    def _own_buffers(self) -> Iterator[tuple[str, np.ndarray | None]]:
        return iter(())

    def _set_buffer(self, name: str, value: np.ndarray) -> None:
        raise KeyError(name)

    def train(self, mode: bool = True) -> "Module":
        for _, m in self.named_modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        for name, arr in self.named_buffers():
            if arr is not None:
                state[name] = arr
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = dict(self.named_parameters())
        mods = dict(self.named_modules())
        buffer_names = {name for name, _ in self.named_buffers()}
        missing = [n for n in params if n not in state]
        unexpected = [n for n in state if n not in params and n not in buffer_names]
        if strict and (missing or unexpected):
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, p in params.items():
            if name in state:
                arr = np.asarray(state[name])
                if arr.shape != p.shape:
                    raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
                p.data = arr.astype(p.dtype, copy=True)
        for name in buffer_names:
            if name in state:
                mname, _, bname = name.rpartition(".")
                mods[mname]._set_buffer(bname, np.array(state[name]))


def kaiming_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, dtype=None) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype or get_default_dtype())


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True, dtype=None):
        dtype = dtype or get_default_dtype()
        self.weight = Parameter(kaiming_uniform(rng, (d_out, d_in), d_in, dtype))
        self.bias = Parameter(np.zeros(d_out, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(
        self,
        c_in: int,
        c_out: int,
        k: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int | None = None,
        bias: bool = True,
        dtype=None,
    ):
        dtype = dtype or get_default_dtype()
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.weight = Parameter(kaiming_uniform(rng, (c_out, c_in, k, k), c_in * k * k, dtype))
        self.bias = Parameter(np.zeros(c_out, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=None):
        dtype = dtype or get_default_dtype()
        self.state = F.BatchNormState(channels, momentum, eps)
        self.weight = Parameter(np.ones(channels, dtype=dtype))
        self.bias = Parameter(np.zeros(channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return F.batch_norm(x, self.state, self.weight, self.bias, training=self.training)

    def _own_buffers(self):
        yield "running_mean", self.state.running_mean
        yield "running_var", self.state.running_var

    def _set_buffer(self, name: str, value: np.ndarray) -> None:
        if name not in ("running_mean", "running_var"):
            raise KeyError(name)
        setattr(self.state, name, value.astype(self.weight.dtype))


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-6, dtype=None):
        dtype = dtype or get_default_dtype()
        self.eps = eps
        self.weight = Parameter(np.ones(d, dtype=dtype))
        self.bias = Parameter(np.zeros(d, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.weight, self.bias, self.eps)


class ConvBNGelu(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng, stride: int = 1, dtype=None):
        self.conv = Conv2d(c_in, c_out, k, rng, stride=stride, bias=False, dtype=dtype)
        self.bn = BatchNorm2d(c_out, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return F.gelu(self.bn(self.conv(x)))
