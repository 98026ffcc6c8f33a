"""Reusable layers: linear maps, SiLU MLPs, a ViT-style transformer block
and adaptive (learnable affine) normalization.

Weights initialize to uniform(-s, s) with s = sqrt(6 / (fan_in + fan_out)),
biases to zero.  Transformer blocks are pre-norm, carry no positional
encoding and therefore are permutation-equivariant over tokens.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

NORM_EPS = 1e-5


class Module:
    """Minimal parameter container; children are discovered via attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, val in vars(self).items():
            if isinstance(val, Tensor):
                if val.requires_grad:
                    yield prefix + name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{name}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{prefix}{name}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int,
                   shape=None, dtype=np.float64) -> Tensor:
    s = np.sqrt(6.0 / (fan_in + fan_out))
    data = rng.uniform(-s, s, size=shape or (fan_in, fan_out)).astype(dtype)
    return Tensor(data, requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 dtype=np.float64):
        self.w = glorot_uniform(rng, d_in, d_out, dtype=dtype)
        self.b = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.matmul(x, self.w) + self.b


class Mlp(Module):
    """Two linear layers with SiLU in between; no output activation."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int,
                 rng: np.random.Generator, dtype=np.float64):
        self.lin1 = Linear(d_in, d_hidden, rng, dtype)
        self.lin2 = Linear(d_hidden, d_out, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.lin2(T.silu(self.lin1(x)))


class AdaptiveNorm(Module):
    """Standardize over the feature axis, then apply a learnable affine.

    The standard deviation is floored at NORM_EPS, so constant inputs map to
    the shift parameter and scaling the input by any positive constant leaves
    the output unchanged (exactly, whenever the std clears the floor).
    """

    def __init__(self, d: int, dtype=np.float64):
        self.g = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
        self.b = Tensor(np.zeros(d, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.standardize(x, NORM_EPS) * self.g + self.b


class TransformerBlock(Module):
    """Single pre-norm ViT-style block: multi-head self-attention + MLP.

    Input and output shape are both (..., N, d); d must be divisible by the
    head count.
    """

    def __init__(self, d: int, rng: np.random.Generator, n_heads: int = 4,
                 ff_ratio: int = 4, dtype=np.float64):
        if d % n_heads != 0:
            raise ShapeError(f"model dim {d} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.head_dim = d // n_heads
        self.norm_attn = AdaptiveNorm(d, dtype)
        self.norm_ffn = AdaptiveNorm(d, dtype)
        self.wq = Linear(d, d, rng, dtype)
        self.wk = Linear(d, d, rng, dtype)
        self.wv = Linear(d, d, rng, dtype)
        self.wo = Linear(d, d, rng, dtype)
        self.ffn = Mlp(d, ff_ratio * d, d, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.norm_attn(x)
        q, k, v = self.wq(h), self.wk(h), self.wv(h)
        scale = 1.0 / np.sqrt(self.head_dim)
        heads = []
        for i in range(self.n_heads):
            lo = i * self.head_dim
            qh = T.narrow(q, -1, lo, self.head_dim)
            kh = T.narrow(k, -1, lo, self.head_dim)
            vh = T.narrow(v, -1, lo, self.head_dim)
            scores = T.matmul(qh, T.transpose_last(kh)) * scale  # (..., N, N)
            att = T.softmax(scores, axis=-1)
            heads.append(T.matmul(att, vh))
        x = x + self.wo(T.concat(heads, axis=-1))
        x = x + self.ffn(self.norm_ffn(x))
        return x
