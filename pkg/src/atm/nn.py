"""Parameter containers and the handful of layers the models need."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, conv2d, matmul, power, tensor

HE_GAIN = 6.0  # uniform bound sqrt(6 / fan_in), variance-preserving under ReLU


def uniform_init(rng: np.random.Generator, shape, fan_in: int, gain: float = 1.0) -> Tensor:
    """Uniform in +-sqrt(gain / fan_in)."""
    bound = np.sqrt(gain / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Module:
    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            yield from _walk(value, prefix + name)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict):
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)[:5]}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _walk(value, name):
    if isinstance(value, Tensor):
        if value.requires_grad:
            yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(name + ".")
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _walk(v, f"{name}.{i}")


class Conv2d(Module):
    def __init__(self, c_in, c_out, kernel=3, stride=1, padding=None, rng=None, bias=True,
                 gain=1.0, zero_bias=False):
        rng = rng if rng is not None else np.random.default_rng(0)
        padding = kernel // 2 if padding is None else padding
        fan_in = c_in * kernel * kernel
        self.weight = uniform_init(rng, (c_out, c_in, kernel, kernel), fan_in, gain)
        if bias and not zero_bias:
            self.bias = uniform_init(rng, (c_out,), fan_in)
        else:
            self.bias = Tensor(np.zeros(c_out), requires_grad=bias)
        self.stride, self.padding = stride, padding

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def macs(self, h_out: int, w_out: int) -> int:
        o, c, kh, kw = self.weight.shape
        return o * c * kh * kw * h_out * w_out


class Linear(Module):
    """y = x @ W + b over the last axis; W stored as (in, out)."""

    def __init__(self, d_in, d_out, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = uniform_init(rng, (d_in, d_out), d_in)
        self.bias = uniform_init(rng, (d_out,), d_in)

    def forward(self, x):
        return matmul(x, self.weight) + self.bias


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.shift = Tensor(np.zeros(dim), requires_grad=True)
        self.eps = eps

    def forward(self, x):
        x = tensor(x)
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        return xc * power(var + self.eps, -0.5) * self.gain + self.shift
