"""Parameter containers and the small layer zoo the networks are built from.

Modules register parameters, persistent buffers (running statistics,
spectral-normalization vectors) and child modules automatically on
attribute assignment, so checkpoints can address everything by dotted
name.  Initialization draws from an explicitly passed generator; nothing
touches global random state.
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import SpectralState, Tensor
from .errors import DimensionError, ParameterError


class Parameter(Tensor):
    """A trainable tensor."""

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class Module:
    """Base class providing named parameter/buffer traversal."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, array: np.ndarray) -> None:
        self._buffers[name] = array
        object.__setattr__(self, name, array)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self._buffers:
            yield prefix + name, self._buffers[name]
        for name, child in self._children.items():
            yield from child.named_buffers(prefix + name + ".")

    def modules(self) -> Iterator["Module"]:
        yield self
        for child in self._children.values():
            yield from child.modules()

    def train(self, flag: bool = True) -> "Module":
        for m in self.modules():
            object.__setattr__(m, "training", flag)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        for name, buf in self.named_buffers():
            state[name] = buf
        # spectral states live on layers as `.spectral` attributes
        for mname, m in self._named_modules():
            spec = getattr(m, "spectral", None)
            if isinstance(spec, SpectralState):
                key = (mname + "." if mname else "") + "spectral_u"
                state[key] = spec.u
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        for name, arr in own.items():
            if name not in state:
                raise KeyError(f"missing array {name!r} in state dict")
            src = np.asarray(state[name])
            if src.shape != arr.shape:
                raise DimensionError(
                    f"array {name!r}: stored shape {src.shape} != expected {arr.shape}")
            arr[...] = src.astype(arr.dtype)

    def _named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self._children.items():
            yield from child._named_modules(f"{prefix}.{name}" if prefix else name)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int,
              dtype, scale: float = 1.0) -> np.ndarray:
    """Fan-in-scaled normal initialization."""
    std = scale * math.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(dtype)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, *, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, rate: int = 1,
                 dtype=np.float32, init_scale: float = 1.0):
        super().__init__()
        self.stride, self.padding, self.rate = stride, padding, rate
        fan_in = cin * kernel * kernel
        self.weight = Parameter(he_normal(rng, (cout, cin, kernel, kernel), fan_in,
                                          dtype, init_scale))
        self.bias = Parameter(np.zeros(cout, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, stride=self.stride,
                         padding=self.padding, rate=self.rate)


def _warm_start_spectral(state: SpectralState, weight: np.ndarray,
                         iterations: int = 30) -> None:
    """Converge the persistent vector on the initial weight so the very
    first normalized forward already uses an accurate estimate."""
    mat = weight.reshape(weight.shape[0], -1)
    u = state.u
    for _ in range(iterations):
        v = mat.T @ u
        v /= max(np.linalg.norm(v), 1e-12)
        u = mat @ v
        u /= max(np.linalg.norm(u), 1e-12)
    state.u = u


class SpectralConv2d(Conv2d):
    """Convolution whose weight is spectrally normalized on every forward."""

    def __init__(self, cin: int, cout: int, kernel: int, *, rng, stride: int = 1,
                 padding: int = 0, dtype=np.float32):
        super().__init__(cin, cout, kernel, rng=rng, stride=stride,
                         padding=padding, dtype=dtype)
        self.spectral = SpectralState(cout, rng, dtype=dtype)
        _warm_start_spectral(self.spectral, self.weight.data)

    def forward(self, x: Tensor) -> Tensor:
        w = ad.spectral_normalize(self.weight, self.spectral)
        return ad.conv2d(x, w, self.bias, stride=self.stride, padding=self.padding)


class Linear(Module):
    def __init__(self, nin: int, nout: int, *, rng: np.random.Generator,
                 dtype=np.float32, init_scale: float = 1.0):
        super().__init__()
        self.weight = Parameter(he_normal(rng, (nout, nin), nin, dtype, init_scale))
        self.bias = Parameter(np.zeros(nout, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.weight, self.bias)


class SpectralLinear(Linear):
    def __init__(self, nin: int, nout: int, *, rng, dtype=np.float32):
        super().__init__(nin, nout, rng=rng, dtype=dtype)
        self.spectral = SpectralState(nout, rng, dtype=dtype)
        _warm_start_spectral(self.spectral, self.weight.data)

    def forward(self, x: Tensor) -> Tensor:
        w = ad.spectral_normalize(self.weight, self.spectral)
        return ad.linear(x, w, self.bias)


class BatchNorm2d(Module):
    def __init__(self, channels: int, *, dtype=np.float32,
                 eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.eps, self.momentum = eps, momentum
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return ad.batchnorm2d(x, self.gamma, self.beta, self.running_mean,
                              self.running_var, training=self.training,
                              momentum=self.momentum, eps=self.eps)


class Sequential(Module):
    def __init__(self, *layers: Module):
        super().__init__()
        self.layers = list(layers)
        for i, layer in enumerate(layers):
            self._children[f"layer{i}"] = layer

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x


class ReLU(Module):
    def forward(self, x: Tensor) -> Tensor:
        return ad.relu(x)


class LeakyReLU(Module):
    def __init__(self, slope: float = 0.2):
        super().__init__()
        self.slope = slope

    def forward(self, x: Tensor) -> Tensor:
        return ad.leaky_relu(x, self.slope)


class MaxPool2d(Module):
    def __init__(self, window: int):
        super().__init__()
        if window < 1:
            raise ParameterError("pool window must be >= 1")
        self.window = window

    def forward(self, x: Tensor) -> Tensor:
        return ad.maxpool2d(x, self.window)
