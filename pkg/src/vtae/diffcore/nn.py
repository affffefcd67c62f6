"""Parameter containers for the small networks used throughout."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Linear:
    """y = x W + b with He-uniform initialization (or zeros)."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, zero: bool = False):
        if zero:
            w = np.zeros((n_in, n_out))
        else:
            bound = np.sqrt(6.0 / n_in)
            w = rng.uniform(-bound, bound, size=(n_in, n_out))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(n_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.matmul(x, self.weight), self.bias)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


class MLP:
    """Stack of Linear layers with an activation between them (not after the last)."""

    def __init__(self, sizes, rng, activation="relu", zero_last=False):
        self.sizes = list(sizes)
        self.layers = [
            Linear(a, b, rng, zero=zero_last and i == len(sizes) - 2)
            for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))
        ]
        self.activation = getattr(T, activation)

    def __call__(self, x: Tensor, trace: list | None = None) -> Tensor:
        h = x
        for i, layer in enumerate(self.layers):
            inp = h
            h = layer(h)
            if i < len(self.layers) - 1:
                h = self.activation(h)
            if trace is not None:
                trace.append((f"linear{i}", False, inp, h))
        return h

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]


class Conv2d:
    def __init__(self, c_in, c_out, kernel, rng, stride=1, padding=0):
        bound = np.sqrt(6.0 / (c_in * kernel * kernel))
        self.weight = Tensor(rng.uniform(-bound, bound, size=(c_out, c_in, kernel, kernel)),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


def avg_pool2d(x: Tensor, k: int = 2) -> Tensor:
    b, c, h, w = x.shape
    if h % k or w % k:
        raise T.ContractViolation(f"avg_pool2d: extent {(h, w)} not divisible by {k}")
    return T.reduce_mean(T.reshape(x, (b, c, h // k, k, w // k, k)), axis=(3, 5))


def upsample_nearest(x: Tensor, k: int = 2) -> Tensor:
    b, c, h, w = x.shape
    rep = T.mul(T.reshape(x, (b, c, h, 1, w, 1)), np.ones((1, 1, 1, k, 1, k)))
    return T.reshape(rep, (b, c, h * k, w * k))
