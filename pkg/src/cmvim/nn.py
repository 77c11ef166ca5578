"""Parameter containers and the small layers shared by every model part."""
from __future__ import annotations

import copy
import math
from typing import Iterator

import numpy as np

from . import numerics as nx
from .numerics import Parameter, Tensor


class Module:
    """Holds parameters and sub-modules as attributes; names follow attribute order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item
            elif isinstance(val, dict):
                for k, item in val.items():
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{k}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{k}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            if missing or extra:
                raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for k, p in own.items():
            if k in state:
                arr = np.asarray(state[k])
                if arr.shape != p.shape:
                    raise ValueError(f"{k}: shape {arr.shape} != {p.shape}")
                p.data = arr.astype(p.dtype, copy=True)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def clone(self) -> "Module":
        return copy.deepcopy(self)


def uniform(rng: np.random.Generator, shape, bound: float, dtype) -> Parameter:
    return Parameter(rng.uniform(-bound, bound, size=shape), dtype=dtype)


def normal(rng: np.random.Generator, shape, std: float, dtype) -> Parameter:
    return Parameter(rng.normal(0.0, std, size=shape), dtype=dtype)


def zeros(shape, dtype) -> Parameter:
    return Parameter(np.zeros(shape), dtype=dtype)


def ones(shape, dtype) -> Parameter:
    return Parameter(np.ones(shape), dtype=dtype)


class Linear(Module):
    def __init__(self, rng, d_in: int, d_out: int, dtype, bias: bool = True):
        bound = 1.0 / math.sqrt(d_in)
        self.weight = uniform(rng, (d_in, d_out), bound, dtype)
        self.bias = zeros((d_out,), dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = nx.matmul(x, self.weight)
        return y if self.bias is None else nx.add(y, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, dtype, eps: float = 1e-5):
        self.gain = ones((d,), dtype)
        self.bias = zeros((d,), dtype)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return nx.layer_norm(x, self.gain, self.bias, self.eps)


class MLP(Module):
    """Two linear layers with a SiLU in between."""

    def __init__(self, rng, d_in: int, d_hidden: int, d_out: int, dtype):
        self.fc1 = Linear(rng, d_in, d_hidden, dtype)
        self.fc2 = Linear(rng, d_hidden, d_out, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(nx.silu(self.fc1(x)))
