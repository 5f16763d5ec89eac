"""Small multilayer perceptrons on top of the tape."""

from __future__ import annotations

import numpy as np

from .tensor import Parameter, Tensor, matmul, maximum


class Linear:
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, name: str = "linear"):
        bound = 1.0 / np.sqrt(fan_in)
        self.weight = Parameter(rng.uniform(-bound, bound, size=(fan_in, fan_out)), name=f"{name}.weight")
        self.bias = Parameter(rng.uniform(-bound, bound, size=(fan_out,)), name=f"{name}.bias")

    def __call__(self, x) -> Tensor:
        return matmul(x, self.weight) + self.bias

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]


class MLP:
    """Fully connected ReLU network; the output layer is linear.

    ``sizes`` lists every layer width including input and output, e.g.
    ``[13, 128, 128, 7]`` is two hidden layers of 128 units.
    """

    def __init__(self, sizes: list[int], rng: np.random.Generator, name: str = "mlp"):
        if len(sizes) < 2:
            raise ValueError("an MLP needs at least input and output sizes")
        self.sizes = list(sizes)
        self.name = name
        self.layers = [
            Linear(a, b, rng, name=f"{name}.{i}") for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))
        ]

    def __call__(self, x) -> Tensor:
        for layer in self.layers[:-1]:
            x = maximum(layer(x), 0.0)
        return self.layers[-1](x)

    @property
    def output_layer(self) -> Linear:
        return self.layers[-1]

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}
