"""Parameter containers and the handful of layers the video networks need."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import Tensor, get_default_dtype, reshape


class Parameter(Tensor):
    """A trainable leaf tensor.  Its dotted name is assigned by the owning module tree."""

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


class Module:
    """Base class: attributes that are Parameters, Modules or lists of Modules are discovered."""

    training = True

    def __init__(self):
        self._buffers: dict[str, np.ndarray] = {}

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        if "_buffers" not in self.__dict__:
            self._buffers = {}
        self._buffers[name] = value

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, (Parameter, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{name}.{i}", v

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            else:
                yield from value.named_parameters(full + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, buf in getattr(self, "_buffers", {}).items():
            yield f"{prefix}{name}", buf
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

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
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own_params = dict(self.named_parameters())
        own_bufs = dict(self.named_buffers())
        missing = (set(own_params) | set(own_bufs)) - set(state)
        unexpected = set(state) - set(own_params) - set(own_bufs)
        if strict and (missing or unexpected):
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, arr in state.items():
            target = own_params[name].data if name in own_params else own_bufs.get(name)
            if target is None:
                continue
            if target.shape != arr.shape:
                raise ValueError(f"{name}: shape {arr.shape} does not match {target.shape}")
            target[...] = arr

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))


def _rng(rng) -> np.random.Generator:
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


class Conv(Module):
    """Convolution over video tensors (N, C, T, H, W).

    ``kernel`` is (kt, kh, kw); a kt == 1 kernel is a per-frame 2-D convolution
    and its weight is stored 4-D as (OC, IC, kh, kw).
    """

    def __init__(self, in_ch: int, out_ch: int, kernel, stride=1, padding=0, bias: bool = False, rng=None,
                 init: str = "he"):
        super().__init__()
        kernel = F._tuple(kernel, 3)
        self.stride = F._tuple(stride, 3)
        self.padding = F._tuple(padding, 3)
        self.kernel = kernel
        self.in_ch, self.out_ch = in_ch, out_ch
        shape = (out_ch, in_ch) + (kernel[1:] if kernel[0] == 1 else kernel)
        dtype = get_default_dtype()
        if init == "zeros":
            w = np.zeros(shape, dtype=dtype)
        else:
            # He-normal, fan-out mode
            w = F.he_normal(shape, out_ch * int(np.prod(kernel)), _rng(rng), dtype)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(out_ch, dtype=dtype)) if bias else None

    def full_weight(self) -> Tensor:
        w = self.weight
        if w.ndim == 4:
            w = reshape(w, (self.out_ch, self.in_ch, 1) + self.kernel[1:])
        return w

    def forward(self, x: Tensor) -> Tensor:
        return F.conv3d(x, self.full_weight(), self.bias, self.stride, self.padding)


class BatchNorm(Module):
    """Batch normalisation over axis 1 of an input of any rank >= 2."""

    def __init__(self, channels: int, momentum: float = F.BN_MOMENTUM, eps: float = F.BN_EPS, gamma: float = 1.0):
        super().__init__()
        dtype = get_default_dtype()
        self.weight = Parameter(np.full(channels, gamma, dtype=dtype))
        self.bias = Parameter(np.zeros(channels, dtype=dtype))
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))
        self.momentum, self.eps = momentum, eps

    def forward(self, x: Tensor) -> Tensor:
        return F.batch_norm(
            x, self.weight, self.bias, self._buffers["running_mean"], self._buffers["running_var"],
            self.training, self.momentum, self.eps,
        )


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True, std: float | None = None, rng=None):
        super().__init__()
        dtype = get_default_dtype()
        std = std if std is not None else math.sqrt(1.0 / in_features)
        self.weight = Parameter((_rng(rng).standard_normal((out_features, in_features)) * std).astype(dtype))
        self.bias = Parameter(np.zeros(out_features, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)
