"""Central finite-difference validation of tape gradients, plus the named
check suite covering every primitive and composed block."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor, backward, no_grad


def numeric_gradient(f: Callable[[], Tensor], t: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of the scalar `f()` with respect to `t`."""
    grad = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = f().item()
            flat[i] = orig - h
            lo = f().item()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * h)
    return grad


def max_relative_error(f: Callable[[], Tensor], tensors: Sequence[Tensor],
                       h: float = 1e-5) -> float:
    """Worst elementwise mismatch between tape and finite-difference grads.

    The error is |analytic - numeric| / max(|analytic|, |numeric|, 1), i.e.
    relative for O(1)-or-larger gradients with a unit absolute floor.
    Existing `.grad` values are cleared before and after the check.
    """
    for t in tensors:
        t.grad = None
    with Tape() as tape:
        loss = f()
        backward(loss, tape)
    worst = 0.0
    for t in tensors:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        t.grad = None
        numeric = numeric_gradient(f, t, h=h)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
        err = np.abs(analytic - numeric) / denom
        if err.size:
            worst = max(worst, float(err.max()))
    return worst


# ---------------------------------------------------------------------------
# named check suite
# ---------------------------------------------------------------------------

PRIMITIVE_TOL = 1e-6
COMPOSITE_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    tolerance: float
    error: float

    @property
    def passed(self) -> bool:
        return self.error <= self.tolerance


def _rand(rng, *shape) -> Tensor:
    return Tensor(rng.uniform(-2.0, 2.0, size=shape), requires_grad=True)


def _fixed_weight(rng, shape) -> Tensor:
    """Constant random projector; fixed per check so repeated evaluations of
    the loss see the exact same scalar function."""
    return Tensor(rng.standard_normal(shape))


def _primitive_checks(rng) -> list[tuple[str, Callable]]:
    from . import tensor as T

    def matmul_2d():
        a, b = _rand(rng, 3, 4), _rand(rng, 4, 2)
        w = _fixed_weight(rng, (3, 2))
        return lambda: T.tsum(T.matmul(a, b) * w), [a, b]

    def matmul_batched():
        a, b = _rand(rng, 2, 3, 4), _rand(rng, 4, 2)
        c = _rand(rng, 2, 4, 3)
        w1, w2 = _fixed_weight(rng, (2, 3, 2)), _fixed_weight(rng, (2, 3, 3))
        def f():
            return T.tsum(T.matmul(a, b) * w1) + T.tsum(T.matmul(a, c) * w2)
        return f, [a, b, c]

    def elementwise():
        a, b = _rand(rng, 2, 3, 4), _rand(rng, 2, 3, 1)
        bias = _rand(rng, 4)
        denom = Tensor(rng.uniform(0.5, 2.0, size=(2, 3, 1)), requires_grad=True)
        w = _fixed_weight(rng, (2, 3, 4))
        def f():
            out = (a * b + bias - a * 0.5) / denom
            return T.tsum(out * w)
        return f, [a, b, bias, denom]

    def activations():
        x = _rand(rng, 5)
        w1, w2 = _fixed_weight(rng, (5,)), _fixed_weight(rng, (5,))
        def f():
            return T.tsum(T.sigmoid(x) * w1) + T.tsum(T.silu(x) * w2)
        return f, [x]

    def softmax():
        x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
        m = _rand(rng, 2, 3, 4)
        w1, w2 = _fixed_weight(rng, (3,)), _fixed_weight(rng, (2, 3, 4))
        def f():
            return (T.tsum(T.softmax(x, axis=-1) * w1)
                    + T.tsum(T.softmax(m, axis=1) * w2))
        return f, [x, m]

    def log_sum_exp():
        x = _rand(rng, 2, 4)
        w = _fixed_weight(rng, (2,))
        return lambda: T.tsum(T.log_sum_exp(x, axis=-1) * w), [x]

    def reductions():
        x = _rand(rng, 3, 4)
        w1, w2 = _fixed_weight(rng, (4,)), _fixed_weight(rng, (3, 1))
        def f():
            return (T.tmean(x) + T.tsum(x * x)
                    + T.tsum(T.tmean(x, axis=0) * w1)
                    + T.tsum(T.tsum(x, axis=1, keepdims=True) * w2))
        return f, [x]

    def scalar_maps():
        x = Tensor(rng.uniform(0.5, 2.0, size=5), requires_grad=True)
        ws = [_fixed_weight(rng, (5,)) for _ in range(6)]
        def f():
            parts = [T.sqrt(x), T.exp(x), T.log(x), x ** 3,
                     T.maximum_const(x, 0.9), -x]
            total = None
            for part, w in zip(parts, ws):
                term = T.tsum(part * w)
                total = term if total is None else total + term
            return total
        return f, [x]

    def structure():
        a, b = _rand(rng, 2, 3), _rand(rng, 2, 3)
        w_nar, w_stk = _fixed_weight(rng, (2, 3)), _fixed_weight(rng, (2, 2, 3))
        w_rows, w_rsh = _fixed_weight(rng, (3, 6)), _fixed_weight(rng, (3, 4))
        w_tr = _fixed_weight(rng, (3, 2))
        def f():
            cat = T.concat([a, b], axis=1)            # (2, 6)
            stk = T.stack([a, b], axis=0)             # (2, 2, 3)
            nar = T.narrow(cat, 1, 1, 3)
            rows = T.take_rows(cat, np.array([1, 0, 1]))
            return (T.tsum(nar * w_nar) + T.tsum(stk * w_stk)
                    + T.tsum(rows * w_rows)
                    + T.tsum(T.reshape(cat, (3, 4)) * w_rsh)
                    + T.tsum(T.transpose_last(a) * w_tr))
        return f, [a, b]

    def cross_entropy():
        logits = _rand(rng, 3, 4)
        hard = np.array([0, 3, 1])
        soft = rng.dirichlet(np.ones(4), size=3)
        def f():
            return (T.cross_entropy_logits(logits, hard)
                    + T.cross_entropy_logits(logits, soft))
        return f, [logits]

    return [
        ("matmul", matmul_2d),
        ("matmul-batched", matmul_batched),
        ("elementwise-broadcast", elementwise),
        ("sigmoid-silu", activations),
        ("softmax", softmax),
        ("log-sum-exp", log_sum_exp),
        ("reductions", reductions),
        ("scalar-maps", scalar_maps),
        ("structure-ops", structure),
        ("cross-entropy", cross_entropy),
    ]


def _composite_checks(rng, include_model: bool) -> list[tuple[str, Callable]]:
    from . import tensor as T
    from .config import TrainConfig
    from .interaction import InteractionGate, interaction_loss
    from .model import Model, ModelDims
    from .moe import MoeBlock
    from .nn import AdaptiveNorm, Mlp, TransformerBlock

    def mlp():
        m = Mlp(4, 6, 5, rng)
        x = _rand(rng, 3, 4)
        w = _fixed_weight(rng, (3, 5))
        return lambda: T.tsum(m(x) * w), [x, *m.parameters()]

    def adaptive_norm():
        norm = AdaptiveNorm(8)
        x = _rand(rng, 3, 8)
        w = _fixed_weight(rng, (3, 8))
        return lambda: T.tsum(norm(x) * w), [x, *norm.parameters()]

    def transformer():
        block = TransformerBlock(8, rng, n_heads=4, ff_ratio=2)
        x = _rand(rng, 3, 8)
        w = _fixed_weight(rng, (3, 8))
        return lambda: T.tsum(block(x) * w), [x, *block.parameters()]

    def moe_block():
        block = MoeBlock(8, rng, n_experts=2, ff_ratio=2)
        x = _rand(rng, 3, 8)
        w_o, w_g = _fixed_weight(rng, (8,)), _fixed_weight(rng, (2,))
        def f():
            o, gate = block(x)
            return T.tsum(o * w_o) + T.tsum(gate * w_g)
        return f, [x, *block.parameters()]

    def gate():
        g = InteractionGate(8, 8, rng, hidden=8)
        e_t, e_i = _rand(rng, 2, 8), _rand(rng, 2, 8)
        m_t, m_i = _rand(rng, 2, 8), _rand(rng, 2, 8)
        y_int = np.array([1, 2])
        def f():
            probs, logits = g(e_t, e_i, m_t, m_i)
            return interaction_loss(probs, logits, y_int, eta=0.01, gamma=0.1)
        return f, [e_t, e_i, m_t, m_i, *g.parameters()]

    checks = [
        ("mlp", mlp),
        ("adaptive-norm", adaptive_norm),
        ("transformer-block", transformer),
        ("moe-block", moe_block),
        ("interaction-gate", gate),
    ]
    if not include_model:
        return checks

    def full_model():
        cfg = TrainConfig(d=8, d_c=8, ff_ratio=1, gate_hidden=8, epochs=1)
        model = Model(ModelDims(text_dim=6, image_dim=5, clip_dim=4), cfg, rng)
        batch = {
            "text": rng.uniform(-1, 1, size=(2, 2, 6)),
            "image": rng.uniform(-1, 1, size=(2, 2, 5)),
            "clip_text": rng.uniform(0.2, 1.0, size=(2, 4)),
            "clip_image": rng.uniform(0.2, 1.0, size=(2, 4)),
            "y": np.array([0, 1]),
        }
        pinned = np.array([1, 2])
        # routing must sit clear of a dispatch flip, or the finite-difference
        # probe would step across the hard top-1 discontinuity
        with no_grad():
            probs = model.forward_loss(batch, y_int_override=pinned).dispatch_probs.data
        sorted_probs = np.sort(probs, axis=-1)
        if float((sorted_probs[:, -1] - sorted_probs[:, -2]).min()) < 1e-3:
            raise RuntimeError("degenerate dispatch margin in gradcheck batch")
        def f():
            return model.forward_loss(batch, y_int_override=pinned).loss_total
        return f, list(model.parameters())

    return checks + [("full-model", full_model)]


def run_suite(quick: bool = False, seed: int = 7) -> list[CheckResult]:
    """Run every gradient check; `quick` skips the (slow) full-model check."""
    results = []
    rng = np.random.default_rng(seed)
    for name, factory in _primitive_checks(rng):
        f, tensors = factory()
        results.append(CheckResult(f"primitive/{name}", PRIMITIVE_TOL,
                                   max_relative_error(f, tensors)))
    for name, factory in _composite_checks(rng, include_model=not quick):
        f, tensors = factory()
        results.append(CheckResult(f"composite/{name}", COMPOSITE_TOL,
                                   max_relative_error(f, tensors)))
    return results
