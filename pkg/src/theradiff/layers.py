"""Parameterized layers on top of the autodiff Tensor.

Modules hold named parameters and compose into models whose full state
can be exported/imported as flat ``name -> ndarray`` dictionaries (the
checkpoint container format). Parameter creation order is the definition
order, which keeps optimizer traversal and checkpoints deterministic.

Initialization: He-uniform ``U(-sqrt(6/fan_in), +sqrt(6/fan_in))`` for
convolution and linear weights, zero biases. Layers created with
``zero_init=True`` start with all parameters exactly zero (used for the
control-branch connection layers).
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError


class Module:
    """Base class: collects Tensor parameters from attributes, recursively.

    ``parameters`` includes locked (non-trainable) tensors so checkpoints
    always carry the full state; optimizers iterate
    ``trainable_parameters`` instead.
    """

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                out[name] = value
            elif isinstance(value, Module):
                for sub, p in value.parameters().items():
                    out[f"{name}.{sub}"] = p
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        for sub, p in item.parameters().items():
                            out[f"{name}{i}.{sub}"] = p
        return out

    def trainable_parameters(self) -> dict[str, Tensor]:
        return {name: p for name, p in self.parameters().items() if p.requires_grad}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.parameters().items()}

    def load_state(self, state: dict[str, np.ndarray]):
        params = self.parameters()
        missing = set(params) - set(state)
        if missing:
            raise ContractError(f"missing parameters in state: {sorted(missing)[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.data.shape:
                raise ContractError(f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
            p.data = arr.astype(p.data.dtype).copy()

    def set_trainable(self, flag: bool):
        for p in self.parameters().values():
            p.requires_grad = flag

    def zero_grad(self):
        for p in self.parameters().values():
            p.grad = None

    def cast(self, dtype):
        for p in self.parameters().values():
            p.data = p.data.astype(dtype)
        return self


def he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 bias: bool = True, zero_init: bool = False, dtype=np.float32):
        if zero_init:
            w = np.zeros((d_in, d_out), dtype=dtype)
        else:
            w = he_uniform(rng, (d_in, d_out), d_in, dtype)
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = ad.matmul(x, self.w)
        if self.b is not None:
            out = ad.add(out, self.b)
        return out


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator,
                 padding: int | None = None, bias: bool = True,
                 zero_init: bool = False, dtype=np.float32):
        fan_in = c_in * k * k
        if zero_init:
            w = np.zeros((c_out, c_in, k, k), dtype=dtype)
        else:
            w = he_uniform(rng, (c_out, c_in, k, k), fan_in, dtype)
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True) if bias else None
        self.padding = k // 2 if padding is None else padding

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.w, self.b, padding=self.padding)


class GroupNorm(Module):
    """Normalize over (channels-in-group, H, W) per sample; eps = 1e-5."""

    def __init__(self, groups: int, channels: int, dtype=np.float32):
        if channels % groups:
            raise ContractError(f"GroupNorm: {channels} channels not divisible by {groups} groups")
        self.groups = groups
        self.channels = channels
        self.eps = 1e-5
        self.w = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.b = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        if c != self.channels:
            raise ContractError(f"GroupNorm expected {self.channels} channels, got {c}")
        g = self.groups
        xg = ad.reshape(x, (n, g, (c // g) * h * w))
        mu = ad.tmean(xg, axis=2, keepdims=True)
        xc = ad.sub(xg, mu)
        var = ad.tmean(ad.mul(xc, xc), axis=2, keepdims=True)
        eps = x.data.dtype.type(self.eps)
        xhat = ad.div(xc, ad.tsqrt(ad.add(var, eps)))
        xhat = ad.reshape(xhat, (n, c, h, w))
        scale = ad.reshape(self.w, (1, c, 1, 1))
        shift = ad.reshape(self.b, (1, c, 1, 1))
        return ad.add(ad.mul(xhat, scale), shift)
