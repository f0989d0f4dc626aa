"""Training protocol: one-cycle learning rate, momentum SGD, early stopping
on validation accuracy, and per-epoch history logging.

The schedule warms up with a cosine ramp from max_lr/25 to max_lr at 30% of
the cycle, cosine-decays back to max_lr/25 by the end of the cycle, then
decays linearly through the annihilation phase down to max_lr/2500.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import Dataset, batches
from .errors import ParseError, UnsupportedModeError, UsageError
from .ioutils import atomic_write_text
from .losses import (
    DistillationMode,
    LossWeights,
    SubsetLabelMap,
    total_loss,
)
from .model import ElfisModel
from .subsets import ConfusionMatrix
from .tensor import Tensor

LR_DIV = 25.0
ANNIHILATION_DIV = 100.0
WARMUP_FRACTION = 0.3
MOMENTUM = 0.9

HISTORY_HEADER = "epoch,train_loss,val_acc,lr"


@dataclass
class TrainConfig:
    max_lr: float = 0.05
    cycle_epochs: int = 40
    annihilation_epochs: int = 160
    patience: int = 15
    batch_size: int = 32
    max_epochs: int = 200
    distillation: DistillationMode = DistillationMode.TWO_WAY
    weights: LossWeights = field(default_factory=LossWeights)
    detach_targets: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.max_lr <= 0:
            raise UsageError(f"max_lr must be positive, got {self.max_lr}")
        if self.cycle_epochs < 1 or self.annihilation_epochs < 0:
            raise UsageError("cycle_epochs must be >= 1 and annihilation_epochs >= 0")
        if self.patience < 1 or self.batch_size < 1 or self.max_epochs < 1:
            raise UsageError("patience, batch_size and max_epochs must be positive")
        if self.patience > self.max_epochs:
            raise UsageError(
                f"patience ({self.patience}) cannot exceed max_epochs ({self.max_epochs})"
            )
        if isinstance(self.distillation, str):
            self.distillation = DistillationMode(self.distillation)


def one_cycle_lr(epoch: int, cfg: TrainConfig) -> float:
    """Learning rate for a 0-based epoch index under the one-cycle policy."""
    if epoch < 0:
        raise UsageError(f"epoch must be nonnegative, got {epoch}")
    low = cfg.max_lr / LR_DIV
    final = low / ANNIHILATION_DIV
    peak_epoch = WARMUP_FRACTION * cfg.cycle_epochs
    if epoch <= peak_epoch:
        p = epoch / peak_epoch if peak_epoch > 0 else 1.0
        return low + (cfg.max_lr - low) * 0.5 * (1.0 - math.cos(math.pi * p))
    if epoch <= cfg.cycle_epochs:
        p = (epoch - peak_epoch) / (cfg.cycle_epochs - peak_epoch)
        return low + (cfg.max_lr - low) * 0.5 * (1.0 + math.cos(math.pi * p))
    if cfg.annihilation_epochs == 0:
        return final
    p = (epoch - cfg.cycle_epochs) / cfg.annihilation_epochs
    if p >= 1.0:
        return final
    return low + (final - low) * p


@dataclass
class EpochRecord:
    epoch: int  # 1-based in history files
    train_loss: float
    val_acc: float
    lr: float
    val_kl: float | None = None  # mean KL(P_H0 || P_aggr) on the val split


@dataclass
class TrainingHistory:
    records: list[EpochRecord]
    best_epoch: int
    best_val_acc: float


class EarlyStopper:
    """Stops after `patience` consecutive epochs without a val-accuracy improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -math.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, val_acc: float) -> bool:
        """Record one epoch; returns True when training should stop."""
        if val_acc > self.best:
            self.best = val_acc
            self.best_epoch = epoch
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience


def _forward_numpy(model: ElfisModel, features: np.ndarray):
    """Inference logits (H0, aggregation-or-None) without building a graph."""
    with T.no_grad():
        out = model.forward(Tensor(features))
    aggr = out.logits_aggr.data if out.logits_aggr is not None else None
    return out.logits_h0.data, aggr


def _log_softmax_np(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _validation_metrics(model: ElfisModel, ds: Dataset, batch_size: int):
    """(accuracy, mean KL(P_H0||P_aggr) or None), batches in fixed order."""
    correct = 0
    kl_sum = 0.0
    has_aggr = model.n_experts > 0
    for lo in range(0, len(ds), batch_size):
        feats = ds.features[lo : lo + batch_size]
        labels = ds.labels[lo : lo + batch_size]
        h0, aggr = _forward_numpy(model, feats)
        logits = aggr if aggr is not None else h0
        correct += int((np.argmax(logits, axis=-1) == labels).sum())
        if has_aggr:
            log_p = _log_softmax_np(h0)
            log_q = _log_softmax_np(aggr)
            kl_sum += float((np.exp(log_p) * (log_p - log_q)).sum())
    accuracy = correct / len(ds)
    return accuracy, (kl_sum / len(ds) if has_aggr else None)


def fit(
    model: ElfisModel,
    train_ds: Dataset,
    val_ds: Dataset,
    cfg: TrainConfig,
) -> tuple[ElfisModel, TrainingHistory]:
    """Train jointly with momentum SGD; return the best-val-accuracy snapshot.

    Deterministic given the config seed: batch order, updates and history are
    reproducible bit-for-bit.
    """
    if len(train_ds) == 0 or len(val_ds) == 0:
        raise UsageError("fit requires non-empty train and validation splits")
    if train_ds.n_classes != model.config.n_classes:
        raise UsageError(
            f"dataset has {train_ds.n_classes} classes, model expects {model.config.n_classes}"
        )
    if model.config.aggregation == "median":
        raise UnsupportedModeError("median aggregation cannot be trained; use it at inference")

    label_map = (
        SubsetLabelMap.from_assignment(model.assignment) if model.n_experts else None
    )
    params = model.parameters()
    velocity = {name: np.zeros_like(p.data) for name, p in params.items()}
    stopper = EarlyStopper(cfg.patience)
    records: list[EpochRecord] = []
    snapshot = {name: p.data.copy() for name, p in params.items()}

    for epoch_idx in range(cfg.max_epochs):
        lr = one_cycle_lr(epoch_idx, cfg)
        epoch_losses = []
        for batch in batches(train_ds, cfg.batch_size, cfg.seed, epoch_idx):
            x = Tensor(train_ds.features[batch])
            y = train_ds.labels[batch]
            model.zero_grad()
            loss = total_loss(
                model.forward(x),
                y,
                cfg.weights,
                label_map,
                cfg.distillation,
                detach_targets=cfg.detach_targets,
            )
            loss.backward()
            for name, p in params.items():
                grad = p.grad if p.grad is not None else np.zeros_like(p.data)
                v = MOMENTUM * velocity[name] + grad
                velocity[name] = v
                p.data = p.data - lr * v
            epoch_losses.append(loss.item())

        train_loss = float(np.mean(epoch_losses))
        val_acc, val_kl = _validation_metrics(model, val_ds, cfg.batch_size)
        epoch = epoch_idx + 1
        records.append(EpochRecord(epoch, train_loss, val_acc, lr, val_kl))
        improved_from = stopper.best
        stop = stopper.update(epoch, val_acc)
        if val_acc > improved_from:
            snapshot = {name: p.data.copy() for name, p in params.items()}
        if stop:
            break

    for name, p in params.items():
        p.data = snapshot[name]
    return model, TrainingHistory(records, stopper.best_epoch, stopper.best)


def export_confusion(model: ElfisModel, ds: Dataset, batch_size: int = 256) -> ConfusionMatrix:
    """(true, predicted) counts; predictions come from model.predict
    (aggregation head for the expert model, H0 in baseline mode)."""
    if len(ds) == 0:
        raise UsageError("cannot build a confusion matrix from an empty dataset")
    n = model.config.n_classes
    if ds.n_classes != n:
        raise UsageError(f"dataset has {ds.n_classes} classes, model expects {n}")
    counts = np.zeros((n, n), dtype=np.int64)
    for lo in range(0, len(ds), batch_size):
        preds = model.predict(ds.features[lo : lo + batch_size])
        for true, pred in zip(ds.labels[lo : lo + batch_size], preds):
            counts[true, pred] += 1
    return ConfusionMatrix(counts)


def save_history(history: TrainingHistory, path) -> None:
    lines = [HISTORY_HEADER]
    for r in history.records:
        lines.append(f"{r.epoch},{r.train_loss!r},{r.val_acc!r},{r.lr!r}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_history(path) -> list[EpochRecord]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [line.rstrip("\n") for line in fh if line.strip()]
    if not lines or lines[0] != HISTORY_HEADER:
        raise ParseError(f"{path}: expected header {HISTORY_HEADER!r}")
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != 4:
            raise ParseError(f"{path}: line {lineno}: expected 4 columns")
        try:
            records.append(
                EpochRecord(int(parts[0]), float(parts[1]), float(parts[2]), float(parts[3]))
            )
        except ValueError as exc:
            raise ParseError(f"{path}: line {lineno}: {exc}") from exc
    return records
