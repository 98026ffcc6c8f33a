"""Training loop with dual optimizers, evaluation metrics and checkpoints.

One backward pass per batch feeds two AdamW instances: a dedicated one for
the interaction gate parameters (learning rate lr_gate) and one for every
other parameter (lr_main).  The two partitions are asserted to cover all
parameters exactly once at startup.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .config import TrainConfig
from .dataio import UNKNOWN_TRUTH
from .model import ModelDims, build_model
from .optim import AdamW
from .tensor import NumericFault, Tape, backward, no_grad

N_EXPERTS = 4

CHECKPOINT_VERSION = 1


class TrainingFault(RuntimeError):
    """Numeric fault raised during training, annotated with its location."""

    def __init__(self, epoch: int, batch: int, cause: NumericFault):
        self.epoch = epoch
        self.batch = batch
        self.cause = cause
        super().__init__(f"numeric fault at epoch {epoch}, batch {batch}: {cause}")


@dataclass
class Metrics:
    """Accuracy plus per-class precision/recall/F1 (fake = positive class),
    the routing histogram and per-expert divergence/alignment means."""

    n: int
    accuracy: float
    precision_fake: float
    recall_fake: float
    f1_fake: float
    precision_real: float
    recall_real: float
    f1_real: float
    routing_counts: list[int] | None = None
    mean_delta: list[float | None] | None = None
    mean_rho: list[float | None] | None = None
    routing_agreement: float | None = None
    losses: dict[str, float] | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = (2 * precision * recall / (precision + recall)
          if precision + recall else 0.0)
    return precision, recall, f1


def binary_metrics(y_true: np.ndarray, y_pred: np.ndarray) -> dict[str, float]:
    """Confusion-matrix metrics with class 1 = fake as the positive class."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    tp = int(np.sum((y_pred == 1) & (y_true == 1)))
    fp = int(np.sum((y_pred == 1) & (y_true == 0)))
    fn = int(np.sum((y_pred == 0) & (y_true == 1)))
    tn = int(np.sum((y_pred == 0) & (y_true == 0)))
    p_f, r_f, f_f = _prf(tp, fp, fn)
    p_r, r_r, f_r = _prf(tn, fn, fp)
    return {
        "accuracy": (tp + tn) / max(1, y_true.size),
        "precision_fake": p_f, "recall_fake": r_f, "f1_fake": f_f,
        "precision_real": p_r, "recall_real": r_r, "f1_real": f_r,
    }


def _slice_batch(data: dict[str, np.ndarray], idx: np.ndarray) -> dict[str, np.ndarray]:
    return {k: v[idx] for k, v in data.items()}


def split_arrays(data: dict[str, np.ndarray], test_fraction: float,
                 seed: int) -> tuple[dict, dict]:
    """Seeded held-out split used when no designated test bundle exists."""
    n = data["y"].shape[0]
    perm = np.random.default_rng(seed).permutation(n)
    n_test = max(1, int(round(n * test_fraction)))
    test_idx, train_idx = perm[:n_test], perm[n_test:]
    return _slice_batch(data, train_idx), _slice_batch(data, test_idx)


def evaluate(model, data: dict[str, np.ndarray], batch_size: int = 256) -> Metrics:
    """Deterministic metrics over a dataset; no gradients are recorded."""
    n = data["y"].shape[0]
    preds = np.empty(n, dtype=np.int64)
    dispatch = np.full(n, -1, dtype=np.int64)
    delta = np.full(n, np.nan)
    rho = np.full(n, np.nan)
    losses: dict[str, float] = {}
    routed = False
    with no_grad():
        for start in range(0, n, batch_size):
            idx = np.arange(start, min(start + batch_size, n))
            out = model.forward_loss(_slice_batch(data, idx))
            preds[idx] = np.argmax(out.logits_final.data, axis=-1)
            for key, val in out.loss_parts().items():
                losses[key] = losses.get(key, 0.0) + val * idx.size
            if hasattr(out, "dispatch_idx"):
                routed = True
                dispatch[idx] = out.dispatch_idx
                delta[idx] = out.delta
                rho[idx] = out.rho
    losses = {k: v / n for k, v in losses.items()}
    base = binary_metrics(data["y"], preds)
    metrics = Metrics(n=n, losses=losses, **base)
    if routed:
        metrics.routing_counts = [int(np.sum(dispatch == k)) for k in range(N_EXPERTS)]
        metrics.mean_delta = [
            float(delta[dispatch == k].mean()) if np.any(dispatch == k) else None
            for k in range(N_EXPERTS)]
        metrics.mean_rho = [
            float(rho[dispatch == k].mean()) if np.any(dispatch == k) else None
            for k in range(N_EXPERTS)]
        truth = data.get("truth")
        if truth is not None and np.any(truth != UNKNOWN_TRUTH):
            known = truth != UNKNOWN_TRUTH
            metrics.routing_agreement = float(
                np.mean(dispatch[known] == truth[known]))
    return metrics


@dataclass
class EpochRecord:
    epoch: int
    train_losses: dict[str, float]
    test: Metrics


@dataclass
class TrainResult:
    model: object
    history: list[EpochRecord]
    final: Metrics
    best_epoch: int
    best: Metrics


def check_parameter_partition(model) -> tuple[int, int]:
    """Assert gate/main optimizer partitions cover all parameters exactly once."""
    gate = {id(p) for p in model.gate_parameters()}
    main = {id(p) for p in model.main_parameters()}
    every = {id(p) for p in model.parameters()}
    if gate & main:
        raise AssertionError("optimizer partitions overlap")
    if (gate | main) != every:
        raise AssertionError("optimizer partitions do not cover all parameters")
    return len(gate), len(main)


def train_model(train_data: dict[str, np.ndarray],
                test_data: dict[str, np.ndarray] | None,
                dims: ModelDims, cfg: TrainConfig,
                log=None) -> TrainResult:
    """Train from scratch; returns the model, per-epoch metrics and the best
    epoch (by test accuracy).  Seeded end to end: identical configs and data
    produce identical loss curves."""
    if test_data is None:
        train_data, test_data = split_arrays(train_data, cfg.test_fraction, cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    model = build_model(dims, cfg, rng)
    check_parameter_partition(model)
    gate_params = model.gate_parameters()
    opt_gate = AdamW(gate_params, lr=cfg.lr_gate,
                     weight_decay=cfg.weight_decay) if gate_params else None
    opt_main = AdamW(model.main_parameters(), lr=cfg.lr_main,
                     weight_decay=cfg.weight_decay)

    n = train_data["y"].shape[0]
    history: list[EpochRecord] = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        sums: dict[str, float] = {}
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            try:
                with Tape() as tape:
                    out = model.forward_loss(_slice_batch(train_data, idx))
                    backward(out.loss_total, tape)
            except NumericFault as fault:
                raise TrainingFault(epoch, b, fault) from fault
            if opt_gate is not None:
                opt_gate.step()
            opt_main.step()
            model.zero_grad()
            for key, val in out.loss_parts().items():
                sums[key] = sums.get(key, 0.0) + val * idx.size
        train_losses = {k: v / n for k, v in sums.items()}
        test_metrics = evaluate(model, test_data)
        history.append(EpochRecord(epoch=epoch, train_losses=train_losses,
                                   test=test_metrics))
        if log is not None:
            log(history[-1])

    final = history[-1].test if history else evaluate(model, test_data)
    best_i = max(range(len(history)), default=0,
                 key=lambda i: history[i].test.accuracy)
    best = history[best_i].test if history else final
    return TrainResult(model=model, history=history, final=final,
                       best_epoch=best_i, best=best)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, model):
    """Versioned container of all parameter tensors under stable names."""
    meta = {
        "checkpoint_version": CHECKPOINT_VERSION,
        "config": model.cfg.to_dict(),
        "dims": asdict(model.dims),
    }
    arrays = {f"param/{name}": p.data for name, p in model.named_parameters()}
    with open(path, "wb") as fh:  # plain open keeps the path extension-free
        np.savez(fh, __meta__=np.frombuffer(
            json.dumps(meta).encode("utf-8"), dtype=np.uint8), **arrays)


def load_checkpoint(path):
    """Rebuild the model recorded at `path`; bitwise-identical parameters."""
    with np.load(path) as archive:
        meta = json.loads(bytes(archive["__meta__"]).decode("utf-8"))
        if meta.get("checkpoint_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version in {path}")
        cfg = TrainConfig(**meta["config"])
        dims = ModelDims(**meta["dims"])
        model = build_model(dims, cfg, np.random.default_rng(0))
        saved = {k[len("param/"):]: archive[k]
                 for k in archive.files if k.startswith("param/")}
    current = dict(model.named_parameters())
    if set(saved) != set(current):
        missing = set(current) - set(saved)
        extra = set(saved) - set(current)
        raise ValueError(f"checkpoint/model parameter mismatch: "
                         f"missing={sorted(missing)} extra={sorted(extra)}")
    for name, p in current.items():
        arr = saved[name]
        if arr.shape != p.data.shape:
            raise ValueError(f"parameter {name}: shape {arr.shape} != {p.data.shape}")
        p.data = arr.astype(p.data.dtype, copy=True)
    return model
