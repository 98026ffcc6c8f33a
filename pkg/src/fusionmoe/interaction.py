"""Modality-interaction math: prediction divergence, semantic alignment,
interaction labels, the interaction gate and its regularized loss.

Interaction classes combine two bits: unimodal prediction agreement
(Jensen-Shannon divergence of the two unimodal predictive distributions
under an agreement threshold) and semantic alignment (cosine similarity of
the shared-space alignment vectors over an alignment threshold):

    label = 2 * [divergence < theta_agr] + [cosine > theta_sem]

giving 0=DM, 1=DA, 2=AM, 3=AA (D/A = unimodal predictions
disagree/agree, M/A = semantically misaligned/aligned).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Mlp, Module
from .tensor import ShapeError, Tensor

LN2 = float(np.log(2.0))
N_INTERACTIONS = 4
REGIME_NAMES = ("DM", "DA", "AM", "AA")


class DegenerateInputError(ValueError):
    """Input vector or distribution is degenerate for the requested measure."""


@dataclass(frozen=True)
class InteractionThresholds:
    """Agreement threshold (JS units, natural log) and alignment threshold."""

    theta_agr: float = 0.1
    theta_sem: float = 0.2

    def __post_init__(self):
        if not 0.0 < self.theta_agr <= LN2:
            raise ValueError(f"theta_agr must be in (0, ln 2], got {self.theta_agr}")
        if not -1.0 <= self.theta_sem <= 1.0:
            raise ValueError(f"theta_sem must be in [-1, 1], got {self.theta_sem}")


@dataclass(frozen=True)
class InteractionLabel:
    y_int: int
    delta: float
    rho: float

    @property
    def name(self) -> str:
        return REGIME_NAMES[self.y_int]


def _check_distribution(p: np.ndarray, name: str):
    if np.any(p < -1e-9):
        raise DegenerateInputError(f"{name} has negative mass")
    s = p.sum(axis=-1)
    if np.any(np.abs(s - 1.0) > 1e-6):
        raise DegenerateInputError(f"{name} does not sum to 1")


def _kl_rows(p: np.ndarray, m: np.ndarray) -> np.ndarray:
    # 0 * log(0 / m) := 0; m is zero only where p is zero as well
    mask = p > 0
    safe_p = np.where(mask, p, 1.0)
    safe_m = np.where(mask, m, 1.0)
    return np.where(mask, p * (np.log(safe_p) - np.log(safe_m)), 0.0).sum(axis=-1)


def js_divergence_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise Jensen-Shannon divergence (natural log) of two (B, C) arrays."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ShapeError(f"distribution shapes differ: {p.shape} vs {q.shape}")
    _check_distribution(p, "p")
    _check_distribution(q, "q")
    m = 0.5 * (p + q)
    return 0.5 * _kl_rows(p, m) + 0.5 * _kl_rows(q, m)


def js_divergence(p, q) -> float:
    """Jensen-Shannon divergence of two distributions, in [0, ln 2]."""
    return float(js_divergence_rows(np.atleast_2d(p), np.atleast_2d(q))[0])


def cosine_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise cosine similarity of (B, d) arrays; rejects zero rows."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"vector shapes differ: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    if np.any(na == 0) or np.any(nb == 0):
        raise DegenerateInputError("cosine of a zero vector is undefined")
    return (a * b).sum(axis=-1) / (na * nb)


def semantic_alignment(m_t, m_i) -> float:
    """Cosine similarity of the two alignment vectors, in [-1, 1]."""
    return float(cosine_rows(np.atleast_2d(m_t), np.atleast_2d(m_i))[0])


def interaction_labels_batch(p_text: np.ndarray, p_img: np.ndarray,
                             m_t: np.ndarray, m_i: np.ndarray,
                             thresholds: InteractionThresholds,
                             ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized labels for a batch: (y_int (B,), delta (B,), rho (B,)).

    Inputs are plain arrays (already detached); no gradient flows into the
    produced targets.
    """
    delta = js_divergence_rows(p_text, p_img)
    rho = cosine_rows(m_t, m_i)
    agree = (delta < thresholds.theta_agr).astype(np.int64)
    aligned = (rho > thresholds.theta_sem).astype(np.int64)
    return 2 * agree + aligned, delta, rho


def interaction_label(p_text, p_img, m_t, m_i,
                      thresholds: InteractionThresholds) -> InteractionLabel:
    y, d, r = interaction_labels_batch(np.atleast_2d(p_text), np.atleast_2d(p_img),
                                       np.atleast_2d(m_t), np.atleast_2d(m_i),
                                       thresholds)
    return InteractionLabel(int(y[0]), float(d[0]), float(r[0]))


class InteractionGate(Module):
    """Dispatch network over the four fusion experts.

    Takes the two refined unimodal feature vectors and the two alignment
    vectors; a modality-attention MLP produces one sigmoid weight per slot,
    the weighted slots are concatenated and a gating MLP maps them to four
    logits.  Owns its parameters exclusively (the training loop gives them a
    dedicated optimizer).
    """

    def __init__(self, d: int, d_c: int, rng: np.random.Generator,
                 hidden: int = 64, dtype=np.float64):
        self.d = d
        self.d_c = d_c
        total = 2 * d + 2 * d_c
        self.att_net = Mlp(total, hidden, 4, rng, dtype)
        self.gate_net = Mlp(total, hidden, N_INTERACTIONS, rng, dtype)

    def __call__(self, e_t: Tensor, e_i: Tensor, m_t: Tensor, m_i: Tensor,
                 ) -> tuple[Tensor, Tensor]:
        """Returns (dispatch probabilities, raw logits), shapes (..., 4)."""
        single = e_t.ndim == 1
        if single:
            e_t, e_i = T.reshape(e_t, (1, -1)), T.reshape(e_i, (1, -1))
            m_t, m_i = T.reshape(m_t, (1, -1)), T.reshape(m_i, (1, -1))
        if e_t.shape[-1] != self.d or m_t.shape[-1] != self.d_c:
            raise ShapeError(f"gate expects feature dims ({self.d}, {self.d_c}), "
                             f"got ({e_t.shape[-1]}, {m_t.shape[-1]})")
        slots = (e_t, e_i, m_t, m_i)
        att = T.sigmoid(self.att_net(T.concat(slots, axis=-1)))  # (B, 4)
        weighted = T.concat(
            [slot * T.narrow(att, -1, i, 1) for i, slot in enumerate(slots)],
            axis=-1)
        logits = self.gate_net(weighted)
        probs = T.softmax(logits, axis=-1)
        if single:
            probs, logits = T.reshape(probs, (-1,)), T.reshape(logits, (-1,))
        return probs, logits


def router_z_loss(logits: Tensor) -> Tensor:
    """Mean squared log-sum-exp of the raw gate logits over the batch."""
    if logits.ndim == 1:
        logits = T.reshape(logits, (1, -1))
    lse = T.log_sum_exp(logits, axis=-1)
    return T.tmean(lse * lse)


def balance_loss(probs: Tensor, dispatch_idx, mode: str = "st_moe") -> Tensor:
    """Load-balance penalty over the fusion experts.

    "st_moe" (default): n_exp * sum_i f_i * P_i with f_i the hard dispatch
    fraction and P_i the batch-mean dispatch probability; equals 1.0 exactly
    at uniform routing with uniform probabilities and n_exp when collapsed.
    "paper_literal": mean squared deviation of P_i from the uniform 1/n_exp.
    """
    if probs.ndim == 1:
        probs = T.reshape(probs, (1, -1))
    batch, n_exp = probs.shape
    if batch < 1:
        raise ShapeError("balance_loss needs a nonempty batch")
    mean_probs = T.tmean(probs, axis=0)  # (n_exp,)
    if mode == "st_moe":
        idx = np.asarray(dispatch_idx, dtype=np.int64).reshape(-1)
        if idx.shape[0] != batch:
            raise ShapeError(f"dispatch count {idx.shape[0]} != batch {batch}")
        frac = np.bincount(idx, minlength=n_exp).astype(np.float64) / batch
        return T.tsum(mean_probs * Tensor(frac)) * float(n_exp)
    if mode == "paper_literal":
        dev = mean_probs - 1.0 / n_exp
        return T.tmean(dev * dev)
    raise ValueError(f"unknown balance mode {mode!r}")


def interaction_loss(probs: Tensor, logits: Tensor, y_int, eta: float,
                     gamma: float, balance_mode: str = "st_moe",
                     dispatch_idx=None) -> Tensor:
    """Dispatch cross-entropy plus weighted router-z and balance penalties."""
    if dispatch_idx is None:
        dispatch_idx = np.argmax(probs.data, axis=-1)
    loss = T.cross_entropy_logits(logits, np.asarray(y_int, dtype=np.int64))
    if eta:
        loss = loss + router_z_loss(logits) * eta
    if gamma:
        loss = loss + balance_loss(probs, dispatch_idx, balance_mode) * gamma
    return loss
