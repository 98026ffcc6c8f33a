"""Full network assembly: projections, three refinement branches, unimodal
heads, the interaction gate, four hard-routed fusion experts and the final
classifier, plus the text-only / image-only ablation variants.

Shapes follow the batch convention (B = batch, N = tokens, d = model dim):
raw text tokens (B, N_t, text_dim) and image tokens (B, N_i, image_dim) are
projected to (B, N, d), refined to per-branch vectors (B, d), and the fusion
experts consume the 3-token stack (norm(e_t), e_m, norm(e_i)) of shape
(B, 3, d).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .dataio import BundleHeader
from .interaction import (InteractionGate, InteractionThresholds,
                          interaction_labels_batch, interaction_loss)
from .moe import MoeBlock
from .nn import AdaptiveNorm, Linear, Mlp, Module
from .tensor import ShapeError, Tensor

N_FUSION_EXPERTS = 4


@dataclass(frozen=True)
class ModelDims:
    """Raw embedding widths the model maps into its working dims."""

    text_dim: int
    image_dim: int
    clip_dim: int

    @classmethod
    def from_header(cls, header: BundleHeader) -> "ModelDims":
        return cls(text_dim=header.text_dim, image_dim=header.image_dim,
                   clip_dim=header.clip_dim)


@dataclass
class ForwardOutput:
    logits_final: Tensor          # (B, 2)
    p_text: np.ndarray            # (B, 2) detached head distributions
    p_image: np.ndarray
    dispatch_probs: Tensor        # (B, 4)
    gate_logits: Tensor           # (B, 4)
    dispatch_idx: np.ndarray      # (B,)
    y_int: np.ndarray             # (B,)
    delta: np.ndarray             # (B,)
    rho: np.ndarray               # (B,)
    loss_task: Tensor
    loss_uni: Tensor
    loss_int: Tensor
    loss_total: Tensor

    def loss_parts(self) -> dict[str, float]:
        return {"task": self.loss_task.item(), "uni": self.loss_uni.item(),
                "int": self.loss_int.item(), "total": self.loss_total.item()}


@dataclass
class UnimodalOutput:
    logits_final: Tensor
    loss_task: Tensor
    loss_total: Tensor

    def loss_parts(self) -> dict[str, float]:
        return {"task": self.loss_task.item(), "total": self.loss_total.item()}


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


class Model(Module):
    """Interaction-routed mixture-of-experts fusion classifier."""

    def __init__(self, dims: ModelDims, cfg: TrainConfig, rng: np.random.Generator):
        d, dtype = cfg.d, cfg.dtype
        self.cfg = cfg
        self.dims = dims
        self.thresholds = InteractionThresholds(cfg.theta_agr, cfg.theta_sem)
        self.proj_text = Linear(dims.text_dim, d, rng, dtype)
        self.proj_image = Linear(dims.image_dim, d, rng, dtype)
        # identity when the raw clip width already matches the working width
        self.proj_clip = (Linear(dims.clip_dim, cfg.d_c, rng, dtype)
                          if dims.clip_dim != cfg.d_c else None)
        self.refine_text = MoeBlock(d, rng, cfg.n_experts, cfg.n_heads, cfg.ff_ratio, dtype)
        self.refine_image = MoeBlock(d, rng, cfg.n_experts, cfg.n_heads, cfg.ff_ratio, dtype)
        self.refine_multi = MoeBlock(d, rng, cfg.n_experts, cfg.n_heads, cfg.ff_ratio, dtype)
        self.head_text = Mlp(d, d, 2, rng, dtype)
        self.head_image = Mlp(d, d, 2, rng, dtype)
        self.norm_text = AdaptiveNorm(d, dtype)
        self.norm_image = AdaptiveNorm(d, dtype)
        self.gate = InteractionGate(d, cfg.d_c, rng, cfg.gate_hidden, dtype)
        self.fusion_experts = [
            MoeBlock(d, rng, cfg.n_experts, cfg.n_heads, cfg.ff_ratio, dtype)
            for _ in range(N_FUSION_EXPERTS)]
        self.head_final = Mlp(d, d, 2, rng, dtype)

    # -- parameter partition -------------------------------------------------

    def gate_parameters(self) -> list[Tensor]:
        return self.gate.parameters()

    def main_parameters(self) -> list[Tensor]:
        return [p for name, p in self.named_parameters()
                if not name.startswith("gate.")]

    # -- stages ---------------------------------------------------------------

    def refine(self, x_text: Tensor, x_image: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Project raw token sequences and refine each branch to a d-vector."""
        u_t = self.proj_text(x_text)     # (B, N_t, d)
        u_i = self.proj_image(x_image)   # (B, N_i, d)
        u_m = T.concat([u_t, u_i], axis=-2)
        e_t, _ = self.refine_text(u_t)
        e_i, _ = self.refine_image(u_i)
        e_m, _ = self.refine_multi(u_m)
        return e_t, e_i, e_m

    def unimodal_predict(self, e_t: Tensor, e_i: Tensor) -> tuple[Tensor, Tensor]:
        """Auxiliary head logits; never part of the final prediction path."""
        if self.cfg.detach_unimodal:
            e_t, e_i = e_t.detach(), e_i.detach()
        return self.head_text(e_t), self.head_image(e_i)

    def fuse_and_classify(self, e_t: Tensor, e_i: Tensor, e_m: Tensor,
                          dispatch_idx: np.ndarray, dispatch_probs: Tensor) -> Tensor:
        """Route each sample through its single active fusion expert.

        The fused vector is scaled by the winning dispatch probability so the
        gate receives task-loss gradient through the selected path; experts
        that were not dispatched to receive no gradient at all.
        """
        idx = np.asarray(dispatch_idx, dtype=np.int64).reshape(-1)
        if idx.size and (idx.min() < 0 or idx.max() >= N_FUSION_EXPERTS):
            raise IndexError(f"dispatch index out of range [0, {N_FUSION_EXPERTS})")
        tokens = T.stack([self.norm_text(e_t), e_m, self.norm_image(e_i)], axis=-2)
        if tokens.ndim == 2:  # single sample: (3, d)
            k = int(idx[0])
            fused, _ = self.fusion_experts[k](tokens)
            w = T.narrow(dispatch_probs.reshape((1, -1)), -1, k, 1)
            logits = self.head_final(fused.reshape((1, -1)) * w)
            return logits.reshape((-1,))
        pieces, taken = [], []
        for k in range(N_FUSION_EXPERTS):
            rows = np.nonzero(idx == k)[0]
            if rows.size == 0:
                continue
            fused_k, _ = self.fusion_experts[k](T.take_rows(tokens, rows))
            w_k = T.narrow(T.take_rows(dispatch_probs, rows), -1, k, 1)
            pieces.append(fused_k * w_k)
            taken.append(rows)
        order = np.concatenate(taken)
        inverse = np.empty_like(order)
        inverse[order] = np.arange(order.size)
        fused = T.take_rows(T.concat(pieces, axis=0), inverse)
        return self.head_final(fused)

    # -- full pass -------------------------------------------------------------

    def forward_loss(self, batch: dict[str, np.ndarray],
                     y_int_override: np.ndarray | None = None) -> ForwardOutput:
        cfg = self.cfg
        dtype = cfg.dtype
        x_t = Tensor(np.asarray(batch["text"], dtype=dtype))
        x_i = Tensor(np.asarray(batch["image"], dtype=dtype))
        y = np.asarray(batch["y"], dtype=np.int64)
        if x_t.shape[0] != y.shape[0] or y.shape[0] < 1:
            raise ShapeError("batch arrays are empty or inconsistent")

        e_t, e_i, e_m = self.refine(x_t, x_i)
        logits_t, logits_i = self.unimodal_predict(e_t, e_i)
        loss_uni = (T.cross_entropy_logits(logits_t, y)
                    + T.cross_entropy_logits(logits_i, y)) * 0.5

        # routing targets from detached head outputs and raw alignment vectors
        p_text = _softmax_rows(logits_t.data)
        p_image = _softmax_rows(logits_i.data)
        y_int, delta, rho = interaction_labels_batch(
            p_text, p_image, batch["clip_text"], batch["clip_image"], self.thresholds)
        if y_int_override is not None:
            y_int = np.asarray(y_int_override, dtype=np.int64)

        m_t = Tensor(np.asarray(batch["clip_text"], dtype=dtype))
        m_i = Tensor(np.asarray(batch["clip_image"], dtype=dtype))
        if self.proj_clip is not None:
            m_t, m_i = self.proj_clip(m_t), self.proj_clip(m_i)
        probs, gate_logits = self.gate(e_t, e_i, m_t, m_i)
        dispatch = np.argmax(probs.data, axis=-1)
        loss_int = interaction_loss(probs, gate_logits, y_int, cfg.eta, cfg.gamma,
                                    cfg.balance_mode, dispatch)

        logits_final = self.fuse_and_classify(e_t, e_i, e_m, dispatch, probs)
        loss_task = T.cross_entropy_logits(logits_final, y)
        loss_total = loss_task + loss_uni * cfg.alpha + loss_int * cfg.beta
        return ForwardOutput(
            logits_final=logits_final, p_text=p_text, p_image=p_image,
            dispatch_probs=probs, gate_logits=gate_logits, dispatch_idx=dispatch,
            y_int=y_int, delta=delta, rho=rho, loss_task=loss_task,
            loss_uni=loss_uni, loss_int=loss_int, loss_total=loss_total)


class UnimodalModel(Module):
    """Single-branch ablation: projection, one refinement block, MLP head."""

    def __init__(self, dims: ModelDims, cfg: TrainConfig, rng: np.random.Generator):
        if cfg.mode not in ("text_only", "image_only"):
            raise ValueError(f"unimodal model needs an ablation mode, got {cfg.mode!r}")
        d, dtype = cfg.d, cfg.dtype
        self.cfg = cfg
        self.dims = dims
        raw = dims.text_dim if cfg.mode == "text_only" else dims.image_dim
        self.proj = Linear(raw, d, rng, dtype)
        self.refine = MoeBlock(d, rng, cfg.n_experts, cfg.n_heads, cfg.ff_ratio, dtype)
        self.head = Mlp(d, d, 2, rng, dtype)

    def gate_parameters(self) -> list[Tensor]:
        return []

    def main_parameters(self) -> list[Tensor]:
        return self.parameters()

    def forward_loss(self, batch: dict[str, np.ndarray], **_ignored) -> UnimodalOutput:
        key = "text" if self.cfg.mode == "text_only" else "image"
        x = Tensor(np.asarray(batch[key], dtype=self.cfg.dtype))
        y = np.asarray(batch["y"], dtype=np.int64)
        pooled, _ = self.refine(self.proj(x))
        logits = self.head(pooled)
        loss = T.cross_entropy_logits(logits, y)
        return UnimodalOutput(logits_final=logits, loss_task=loss, loss_total=loss)


def build_model(dims: ModelDims, cfg: TrainConfig,
                rng: np.random.Generator) -> Model | UnimodalModel:
    if cfg.mode == "full":
        return Model(dims, cfg, rng)
    return UnimodalModel(dims, cfg, rng)
