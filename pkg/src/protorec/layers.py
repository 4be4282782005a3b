"""Parameter containers and the small dense blocks shared by every tower."""

from __future__ import annotations

from typing import Iterator, Sequence

import numpy as np

from .numerics import Tensor, glorot_uniform, matmul, parameter, relu


class Module:
    """Walks attributes to find parameters; names are dotted attribute paths."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in own.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ValueError(f"{name}: expected shape {p.shape}, got {value.shape}")
            p.data[...] = value


class Linear(Module):
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = parameter(glorot_uniform(rng, fan_in, fan_out))
        self.bias = parameter(np.zeros(fan_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = matmul(x, self.weight)
        return out + self.bias if self.bias is not None else out


class Mlp(Module):
    """ReLU between layers, linear output. ``sizes`` includes input and output widths."""

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator):
        if len(sizes) < 2:
            raise ValueError("an MLP needs at least input and output widths")
        self.sizes = tuple(sizes)
        self.layers = [Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers[:-1]:
            x = relu(layer(x))
        return self.layers[-1](x)

    def zero_(self) -> None:
        for p in self.parameters():
            p.data[...] = 0.0

    def identity_(self) -> None:
        """Set weights so the network computes x exactly (relu(x) - relu(-x)).

        Needs equal input and output widths and every hidden width >= 2 * input.
        """
        d = self.sizes[0]
        if self.sizes[-1] != d or any(w < 2 * d for w in self.sizes[1:-1]):
            raise ValueError(f"identity init needs sizes (d, >=2d, ..., d), got {self.sizes}")
        eye = np.eye(d)
        for k, layer in enumerate(self.layers):
            w = np.zeros(layer.weight.shape)
            if k == 0:
                w[:, :2 * d] = np.hstack([eye, -eye]) if len(self.layers) > 1 else eye
            elif k == len(self.layers) - 1:
                w[:2 * d] = np.vstack([eye, -eye])
            else:
                w[:2 * d, :2 * d] = np.eye(2 * d)
            layer.weight.data[...] = w
            if layer.bias is not None:
                layer.bias.data[...] = 0.0
