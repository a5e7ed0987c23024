"""Layers built on the autodiff primitives."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from eskin.autodiff.tensor import (
    Tensor,
    concat,
    dropout,
    layer_norm,
    linear,
    relu,
    reshape,
    scaled_dot_product_attention,
    take_rows,
    transpose,
)


class Module:
    """Container of named parameters and sub-modules with a train/eval flag."""

    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, p in params.items():
            if state[k].shape != p.shape:
                raise ValueError(f"{k}: shape {state[k].shape} does not match {p.shape}")
            p.data = np.array(state[k], dtype=p.dtype, copy=True)

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


def _param(arr, dtype) -> Tensor:
    return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, dtype=np.float32):
        bound = 1.0 / math.sqrt(n_in)
        self.weight = _param(rng.uniform(-bound, bound, (n_in, n_out)), dtype)
        self.bias = _param(rng.uniform(-bound, bound, n_out), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, n: int, dtype=np.float32, eps: float = 1e-5):
        self.gamma = _param(np.ones(n), dtype)
        self.beta = _param(np.zeros(n), dtype)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


class Dropout(Module):
    def __init__(self, p: float, rng: np.random.Generator):
        self.p = p
        self.rng = rng

    def __call__(self, x: Tensor) -> Tensor:
        return dropout(x, self.p, self.training, self.rng)


class MLP(Module):
    """Linear layers with ReLU in between (none after the last)."""

    def __init__(self, sizes: list[int], rng: np.random.Generator, dtype=np.float32):
        self.layers = [Linear(a, b, rng, dtype) for a, b in zip(sizes[:-1], sizes[1:])]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = relu(x)
        return x


class Embedding(Module):
    def __init__(self, n: int, dim: int, rng: np.random.Generator, dtype=np.float32):
        self.table = _param(rng.normal(0.0, 0.02, (n, dim)), dtype)

    def __call__(self, index) -> Tensor:
        return take_rows(self.table, np.asarray(index))


class MultiHeadAttention(Module):
    def __init__(self, width: int, heads: int, rng: np.random.Generator, dtype=np.float32):
        if width % heads:
            raise ValueError(f"width {width} is not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(width, width, rng, dtype)
        self.k = Linear(width, width, rng, dtype)
        self.v = Linear(width, width, rng, dtype)
        self.out = Linear(width, width, rng, dtype)

    def _split(self, x: Tensor) -> Tensor:
        b, n, w = x.shape
        return transpose(reshape(x, (b, n, self.heads, w // self.heads)), (0, 2, 1, 3))

    def __call__(self, query: Tensor, source: Tensor) -> Tensor:
        b, n, w = query.shape
        a = scaled_dot_product_attention(
            self._split(self.q(query)), self._split(self.k(source)), self._split(self.v(source))
        )
        merged = reshape(transpose(a, (0, 2, 1, 3)), (b, n, w))
        return self.out(merged)


class FeedForward(Module):
    def __init__(self, width: int, hidden: int, rng: np.random.Generator, dtype=np.float32):
        self.fc1 = Linear(width, hidden, rng, dtype)
        self.fc2 = Linear(hidden, width, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(relu(self.fc1(x)))


class EncoderLayer(Module):
    """Pre-norm self-attention block followed by a feed-forward block."""

    def __init__(self, width, heads, hidden, p_drop, rng, dtype=np.float32):
        self.norm1 = LayerNorm(width, dtype)
        self.attn = MultiHeadAttention(width, heads, rng, dtype)
        self.norm2 = LayerNorm(width, dtype)
        self.ff = FeedForward(width, hidden, rng, dtype)
        self.drop = Dropout(p_drop, rng)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.norm1(x)
        x = x + self.drop(self.attn(h, h))
        return x + self.drop(self.ff(self.norm2(x)))


class DecoderLayer(Module):
    """Pre-norm self-attention, cross-attention to the encoder memory, feed-forward."""

    def __init__(self, width, heads, hidden, p_drop, rng, dtype=np.float32):
        self.norm1 = LayerNorm(width, dtype)
        self.self_attn = MultiHeadAttention(width, heads, rng, dtype)
        self.norm2 = LayerNorm(width, dtype)
        self.cross_attn = MultiHeadAttention(width, heads, rng, dtype)
        self.norm3 = LayerNorm(width, dtype)
        self.ff = FeedForward(width, hidden, rng, dtype)
        self.drop = Dropout(p_drop, rng)

    def __call__(self, x: Tensor, memory: Tensor) -> Tensor:
        h = self.norm1(x)
        x = x + self.drop(self.self_attn(h, h))
        x = x + self.drop(self.cross_attn(self.norm2(x), memory))
        return x + self.drop(self.ff(self.norm3(x)))


__all__ = [
    "Module",
    "Linear",
    "LayerNorm",
    "Dropout",
    "MLP",
    "Embedding",
    "MultiHeadAttention",
    "FeedForward",
    "EncoderLayer",
    "DecoderLayer",
    "concat",
]
