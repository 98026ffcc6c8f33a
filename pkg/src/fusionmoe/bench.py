"""Runtime scaling measurement for the refinement forward pass."""

from __future__ import annotations

import time

import numpy as np

from .moe import MoeBlock
from .tensor import Tensor, no_grad


def refinement_forward_seconds(n_tokens: int, d: int = 64, n_experts: int = 2,
                               batch: int = 16, repeats: int = 7,
                               seed: int = 0) -> float:
    """Median wall time of one refinement-block forward at (batch, n_tokens, d).

    A moderate batch keeps the numpy kernels (which carry the N scaling)
    dominant over the fixed per-op interpreter overhead.
    """
    rng = np.random.default_rng(seed)
    block = MoeBlock(d, rng, n_experts=n_experts)
    x = Tensor(rng.standard_normal((batch, n_tokens, d)))
    times = []
    with no_grad():
        block(x)  # warm-up
        for _ in range(repeats):
            t0 = time.perf_counter()
            block(x)
            times.append(time.perf_counter() - t0)
    return float(np.median(times))


def scaling_exponent(token_counts=(32, 64, 128, 256), d: int = 64,
                     batch: int = 16, repeats: int = 7,
                     seed: int = 0) -> tuple[float, list[float]]:
    """Least-squares slope of log(time) vs log(N) over the token counts.

    The attention term grows as N^2 and the per-token projections as N, so
    the fitted exponent lands between linear and quadratic.
    """
    times = [refinement_forward_seconds(n, d=d, batch=batch, repeats=repeats,
                                        seed=seed)
             for n in token_counts]
    slope = float(np.polyfit(np.log(np.asarray(token_counts, dtype=np.float64)),
                             np.log(np.asarray(times)), 1)[0])
    return slope, times
