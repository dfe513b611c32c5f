"""Parameter containers and the few layers everything else is built from."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .rng import Rng
from .tensor import Tensor


def parameter(rng: Rng | None, shape, std: float = 0.02, fill: float | None = None) -> Tensor:
    """Create a trainable tensor.

    With ``rng=None`` the values are zero-filled placeholders (calloc-backed,
    so a full-size model can be instantiated just to count parameters).
    """
    shape = tuple(shape)
    if fill is not None:
        data = np.full(shape, fill, dtype=np.float32)
    elif rng is None or std == 0.0:
        data = np.zeros(shape, dtype=np.float32)
    else:
        data = rng.normal(shape, std=std)
    return Tensor(data, requires_grad=True)


class Module:
    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        seen: set[int] = set()
        yield from self._walk(prefix, seen)

    def _walk(self, prefix: str, seen: set[int]):
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                if value.requires_grad and id(value) not in seen:
                    seen.add(id(value))
                    yield name, value
            elif isinstance(value, Module):
                yield from value._walk(name + ".", seen)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item._walk(f"{name}.{i}.", seen)
                    elif isinstance(item, Tensor) and item.requires_grad and id(item) not in seen:
                        seen.add(id(item))
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, cin: int, cout: int, rng: Rng | None, bias: bool = True, std: float = 0.02):
        self.weight = parameter(rng, (cin, cout), std=std)
        self.bias = parameter(rng, (cout,), std=0.0) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = parameter(None, (dim,), fill=1.0)
        self.beta = parameter(None, (dim,), fill=0.0)
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class MLP(Module):
    """Two linear layers with GELU between them; hidden width ``ratio * dim``."""

    def __init__(self, dim: int, ratio: int, rng: Rng | None):
        if ratio < 1:
            raise ValueError("mlp ratio must be >= 1")
        self.hidden = dim * ratio
        self.fc1 = Linear(dim, self.hidden, rng)
        self.fc2 = Linear(self.hidden, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))
