"""Parameters, modules and a few standard layers."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops
from .tensor import Tensor


class Parameter(Tensor):
    """Trainable leaf tensor; ``name`` is filled in by the owning Module."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(np.asarray(data, dtype=np.float32), requires_grad=True, dtype=np.float32)
        self.name = name
        self.grad = np.zeros_like(self.data)


class Module:
    """Tree of parameters discovered through instance attributes.

    Attributes that are Parameters, Modules, or lists/dicts of them are
    traversed in attribute-definition order, which keeps names and
    checkpoint order stable.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        seen: set[int] = set()
        yield from self._named(prefix, seen)

    def _named(self, prefix, seen):
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            yield from _walk(val, f"{prefix}{key}", seen)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def assign_names(self, root: str) -> None:
        for name, p in self.named_parameters(root + "."):
            p.name = name

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = np.zeros_like(p.data)

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = set(own) - set(state)
            extra = set(state) - set(own)
            if missing or extra:
                raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, arr in state.items():
            if name not in own:
                continue
            p = own[name]
            if p.shape != tuple(arr.shape):
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = np.array(arr, dtype=np.float32)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _walk(val, name, seen):
    if isinstance(val, Parameter):
        if id(val) not in seen:
            seen.add(id(val))
            yield name, val
    elif isinstance(val, Module):
        yield from val._named(name + ".", seen)
    elif isinstance(val, (list, tuple)):
        for i, v in enumerate(val):
            yield from _walk(v, f"{name}.{i}", seen)
    elif isinstance(val, dict):
        for k, v in val.items():
            yield from _walk(v, f"{name}.{k}", seen)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True, zero: bool = False):
        if zero:
            w = np.zeros((d_in, d_out), np.float32)
        else:
            w = rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, d_out)).astype(np.float32)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(d_out, np.float32)) if bias else None

    def forward(self, x) -> Tensor:
        y = ops.matmul(x, self.weight)
        if self.bias is not None:
            y = ops.add(y, self.bias)
        return y


class LayerNorm(Module):
    def __init__(self, d: int):
        self.weight = Parameter(np.ones(d, np.float32))
        self.bias = Parameter(np.zeros(d, np.float32))

    def forward(self, x) -> Tensor:
        return ops.layer_norm(x, self.weight, self.bias)


class MLP(Module):
    """Linear -> GELU -> Linear."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator, zero_out: bool = False):
        self.fc1 = Linear(d_in, d_hidden, rng)
        self.fc2 = Linear(d_hidden, d_out, rng, zero=zero_out)

    def forward(self, x) -> Tensor:
        return self.fc2(ops.gelu(self.fc1(x)))
