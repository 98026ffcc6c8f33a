"""Attention-gated mixture-of-experts pooling block.

The block squeezes a token sequence into per-token sigmoid attention scores,
gates a set of transformer experts on the attention-pooled input, runs every
expert densely, pools each expert output with the shared attention weights
and returns the gate-weighted combination: a single feature vector per
sequence plus the gate distribution.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .nn import Mlp, Module, TransformerBlock
from .tensor import ShapeError, Tensor

ATT_EPS = 1e-8


class MoeBlock(Module):
    def __init__(self, d: int, rng: np.random.Generator, n_experts: int = 2,
                 n_heads: int = 4, ff_ratio: int = 4, dtype=np.float64):
        if n_experts < 1:
            raise ShapeError("need at least one expert")
        self.n_experts = n_experts
        self.att_net = Mlp(d, d, 1, rng, dtype)
        self.gate_net = Mlp(d, d, n_experts, rng, dtype)
        self.experts = [TransformerBlock(d, rng, n_heads, ff_ratio, dtype)
                        for _ in range(n_experts)]

    def attention_squeeze(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Per-token sigmoid scores and the score-normalized pooled vector.

        x: (N, d) or (B, N, d) with N >= 1.  Returns att with a trailing
        singleton axis ((N, 1) / (B, N, 1)) and pooled ((d,) / (B, d)).
        """
        if x.ndim < 2 or x.shape[-2] < 1:
            raise ShapeError(f"attention_squeeze needs (..., N>=1, d), got {x.shape}")
        single = x.ndim == 2
        if single:
            x = T.reshape(x, (1,) + x.shape)
        att = T.sigmoid(self.att_net(x))  # (B, N, 1)
        pooled = self._pool(x, att)       # (B, d)
        if single:
            att = T.reshape(att, att.shape[1:])
            pooled = T.reshape(pooled, (-1,))
        return att, pooled

    @staticmethod
    def _pool(x: Tensor, att: Tensor) -> Tensor:
        num = T.tsum(x * att, axis=-2)           # (..., d)
        den = T.tsum(att, axis=-2) + ATT_EPS     # (..., 1)
        return num / den

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Forward pass: (output (..., d), gate (..., n_experts)).

        The output is a convex combination of the attention-pooled expert
        outputs, weighted by the softmax gate computed on the pooled input.
        """
        if x.ndim < 2 or x.shape[-2] < 1:
            raise ShapeError(f"expected (..., N>=1, d) tokens, got {x.shape}")
        single = x.ndim == 2
        if single:
            x = T.reshape(x, (1,) + x.shape)
        att = T.sigmoid(self.att_net(x))                     # (B, N, 1)
        pooled = self._pool(x, att)                          # (B, d)
        gate = T.softmax(self.gate_net(pooled), axis=-1)     # (B, n_e)
        out = None
        for i, expert in enumerate(self.experts):
            pooled_i = self._pool(expert(x), att)            # (B, d)
            w = T.narrow(gate, -1, i, 1)                     # (B, 1)
            term = pooled_i * w
            out = term if out is None else out + term
        if single:
            out = T.reshape(out, (-1,))
            gate = T.reshape(gate, (-1,))
        return out, gate
