"""Layers (linear, layer norm, attention, transformer blocks) built on the tape."""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError


class Module:
    """Container that discovers parameters through its attributes."""

    training = True

    def named_parameters(self, prefix: str = ""):
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

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"state is missing parameters: {sorted(missing)}")
        for name, p in own.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise DimensionError(f"{name}: expected {p.shape}, got {value.shape}")
            p.data[...] = value

    def train(self, mode: bool = True):
        self.training = mode
        for value in vars(self).values():
            if isinstance(value, Module):
                value.train(mode)
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        item.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def uniform_fan_in(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 bias: bool = True, zero_init: bool = False):
        self.in_features = in_features
        self.out_features = out_features
        if zero_init:
            w = np.zeros((in_features, out_features))
            b = np.zeros(out_features)
        else:
            w = uniform_fan_in(rng, in_features, (in_features, out_features))
            b = uniform_fan_in(rng, in_features, out_features)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(b, requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise DimensionError(
                f"Linear expects last dim {self.in_features}, got {x.shape[-1]}"
            )
        return ad.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, size: int, eps: float = 1e-5):
        self.eps = eps
        self.gain = Tensor(np.ones(size), requires_grad=True)
        self.bias = Tensor(np.zeros(size), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias, self.eps)


class MLP(Module):
    """ReLU perceptron; ``sizes`` lists every layer width including in/out."""

    def __init__(self, sizes, rng: np.random.Generator, dropout: float = 0.0):
        self.layers = [Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]
        self.dropout = dropout
        self._rng = rng

    def forward(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ad.relu(x)
                x = ad.dropout(x, self.dropout, self._rng, self.training)
        return x


class MultiHeadAttention(Module):
    """Scaled dot-product attention with an additive per-key logit mask."""

    def __init__(self, hidden: int, num_heads: int, rng: np.random.Generator):
        if hidden % num_heads:
            raise DimensionError(f"hidden size {hidden} not divisible by {num_heads} heads")
        self.hidden = hidden
        self.num_heads = num_heads
        self.head_dim = hidden // num_heads
        self.q = Linear(hidden, hidden, rng)
        self.k = Linear(hidden, hidden, rng)
        self.v = Linear(hidden, hidden, rng)
        self.out = Linear(hidden, hidden, rng)

    def _split(self, x: Tensor) -> Tensor:
        b, length, _ = x.shape
        return x.reshape(b, length, self.num_heads, self.head_dim).transpose(0, 2, 1, 3)

    def forward(self, query: Tensor, memory: Tensor, key_mask=None) -> Tensor:
        """``key_mask`` is ``B x Lk`` and is shared by every head."""
        b, lq, _ = query.shape
        q = self._split(self.q(query))
        k = self._split(self.k(memory))
        v = self._split(self.v(memory))
        scores = ad.matmul(q, k.swapaxes(-1, -2)) * (1.0 / math.sqrt(self.head_dim))
        if key_mask is not None:
            key_mask = ad._lift(key_mask)
            key_mask = key_mask.reshape(key_mask.shape[0], 1, 1, key_mask.shape[-1])
        weights = ad.softmax(scores, key_mask)
        ctx = ad.matmul(weights, v).transpose(0, 2, 1, 3).reshape(b, lq, self.hidden)
        return self.out(ctx)


class FeedForward(Module):
    def __init__(self, hidden: int, inner: int, rng: np.random.Generator, dropout: float = 0.0):
        self.up = Linear(hidden, inner, rng)
        self.down = Linear(inner, hidden, rng)
        self.dropout = dropout
        self._rng = rng

    def forward(self, x: Tensor) -> Tensor:
        h = ad.dropout(ad.relu(self.up(x)), self.dropout, self._rng, self.training)
        return self.down(h)


class EncoderBlock(Module):
    """Pre-norm self-attention block."""

    def __init__(self, hidden, num_heads, rng, ffn_mult=2, dropout=0.0):
        self.norm1 = LayerNorm(hidden)
        self.attn = MultiHeadAttention(hidden, num_heads, rng)
        self.norm2 = LayerNorm(hidden)
        self.ffn = FeedForward(hidden, ffn_mult * hidden, rng, dropout)

    def forward(self, x: Tensor, key_mask=None) -> Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h, key_mask)
        return x + self.ffn(self.norm2(x))


class DecoderBlock(Module):
    """Pre-norm block: self-attention, cross-attention over memory, feed-forward."""

    def __init__(self, hidden, num_heads, rng, ffn_mult=2, dropout=0.0):
        self.norm1 = LayerNorm(hidden)
        self.self_attn = MultiHeadAttention(hidden, num_heads, rng)
        self.norm2 = LayerNorm(hidden)
        self.cross_attn = MultiHeadAttention(hidden, num_heads, rng)
        self.norm3 = LayerNorm(hidden)
        self.ffn = FeedForward(hidden, ffn_mult * hidden, rng, dropout)

    def forward(self, x: Tensor, memory: Tensor, memory_mask=None) -> Tensor:
        h = self.norm1(x)
        x = x + self.self_attn(h, h)
        x = x + self.cross_attn(self.norm2(x), memory, memory_mask)
        return x + self.ffn(self.norm3(x))
