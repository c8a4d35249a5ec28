"""Training protocol: SGD with momentum and coupled weight decay, a
reduce-on-plateau schedule, strict-improvement early stopping, and the
mini-batch training loop with best-epoch checkpointing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as ops
from .data import batch_iter
from .errors import ConfigError, TrainingFault
from .tensor import Tensor, no_grad


@dataclass
class SgdConfig:
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.001

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0,1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")


class Sgd:
    """Velocity update with decay coupled into the gradient:
    g' = g + wd*w; v = mu*v + g'; w -= lr*v. Gradients are cleared after
    the step; a registered parameter without a gradient is an error (it
    would silently never train)."""

    def __init__(self, params: list[Tensor], cfg: SgdConfig):
        self.params = list(params)
        self.cfg = cfg
        self.lr = cfg.lr
        self.velocities = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise TrainingFault(
                    f"parameter {i} (shape {p.shape}) has no gradient; "
                    "it is not reachable from the loss"
                )
            g = p.grad + self.cfg.weight_decay * p.data
            self.velocities[i] = self.cfg.momentum * self.velocities[i] + g
            p.data -= self.lr * self.velocities[i]
            p.zero_grad()

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def _improved(metric: float, best: float | None, mode: str, threshold: float = 0.0) -> bool:
    """Strict improvement; a relative threshold (default 0) widens the bar."""
    if best is None:
        return True
    if mode == "min":
        return metric < best * (1.0 - threshold) if best >= 0 else metric < best * (1.0 + threshold)
    return metric > best * (1.0 + threshold) if best >= 0 else metric > best * (1.0 - threshold)


@dataclass
class PlateauScheduler:
    """Multiply lr by ``factor`` once the monitored metric has failed to
    improve (strictly) for more than ``patience`` consecutive epochs."""

    patience: int = 10
    factor: float = 0.1
    min_lr: float = 1e-6
    mode: str = "min"
    threshold: float = 0.0
    best: float | None = None
    bad_epochs: int = 0

    def __post_init__(self):
        if not 0 < self.factor <= 1:
            raise ConfigError(f"factor must be in (0,1], got {self.factor}")
        if self.min_lr <= 0 or self.patience < 0:
            raise ConfigError("min_lr must be positive and patience non-negative")

    def step(self, optimizer: Sgd, metric: float) -> float:
        if math.isnan(metric):
            raise TrainingFault("scheduler received NaN metric")
        if _improved(metric, self.best, self.mode, self.threshold):
            self.best = metric
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs > self.patience:
                optimizer.lr = max(optimizer.lr * self.factor, self.min_lr)
                self.bad_epochs = 0
        return optimizer.lr


@dataclass
class EarlyStopper:
    """Stop once ``epoch - best_epoch >= patience``; ties are non-improvements."""

    patience: int = 15
    mode: str = "min"
    threshold: float = 0.0
    best: float | None = None
    best_epoch: int = 0
    stop: bool = False

    def update(self, metric: float, epoch: int) -> bool:
        if math.isnan(metric):
            raise TrainingFault("early stopper received NaN metric")
        if _improved(metric, self.best, self.mode, self.threshold):
            self.best = metric
            self.best_epoch = epoch
        self.stop = epoch - self.best_epoch >= self.patience
        return self.stop


@dataclass
class TrainConfig:
    max_epochs: int = 150
    batch_size: int = 30
    seed: int = 0
    monitor: str = "val_loss"  # or "val_bcc"

    def __post_init__(self):
        if self.max_epochs <= 0 or self.batch_size <= 0:
            raise ConfigError("max_epochs and batch_size must be positive")
        if self.monitor not in ("val_loss", "val_bcc"):
            raise ConfigError(f"unknown monitored metric {self.monitor!r}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_bcc: float
    lr: float


@dataclass
class SplitData:
    """One split's arrays; images may be None for metadata-only models."""

    images: np.ndarray | None
    metadata: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def batch(self, idx: np.ndarray) -> tuple[Tensor | None, Tensor, np.ndarray]:
        imgs = Tensor(self.images[idx]) if self.images is not None else None
        return imgs, Tensor(self.metadata[idx]), self.labels[idx]


def _balanced_accuracy_fast(true: np.ndarray, pred: np.ndarray, k: int) -> float:
    recalls = []
    for c in range(k):
        mask = true == c
        if mask.any():
            recalls.append((pred[mask] == c).mean())
    return float(np.mean(recalls))


def evaluate_loss_bcc(model, data: SplitData, num_classes: int,
                      batch_size: int = 256) -> tuple[float, float]:
    """Mean cross-entropy and balanced accuracy over a split (no grad)."""
    total_nll = 0.0
    preds = np.empty(len(data), dtype=int)
    with no_grad():
        for start in range(0, len(data), batch_size):
            idx = np.arange(start, min(start + batch_size, len(data)))
            imgs, meta, labels = data.batch(idx)
            logits = model(imgs, meta)
            total_nll += float(ops.cross_entropy(logits, labels).data) * len(idx)
            preds[idx] = logits.data.argmax(axis=1)
    loss = total_nll / len(data)
    bcc = _balanced_accuracy_fast(data.labels, preds, num_classes)
    return loss, bcc


def train_model(
    model,
    train: SplitData,
    val: SplitData,
    train_cfg: TrainConfig,
    sgd_cfg: SgdConfig | None = None,
    scheduler: PlateauScheduler | None = None,
    stopper: EarlyStopper | None = None,
    num_classes: int | None = None,
) -> list[EpochRecord]:
    """Run the full protocol; the model is left holding the parameters of the
    epoch with the best monitored validation metric. Returns the history."""
    if len(train) == 0 or len(val) == 0:
        raise ConfigError("training and validation splits must be non-empty")
    sgd_cfg = sgd_cfg or SgdConfig()
    mode = "min" if train_cfg.monitor == "val_loss" else "max"
    scheduler = scheduler if scheduler is not None else PlateauScheduler(mode=mode)
    stopper = stopper if stopper is not None else EarlyStopper(mode=mode)
    if num_classes is None:
        num_classes = int(train.labels.max()) + 1

    params = model.parameters()
    optimizer = Sgd(params, sgd_cfg)
    best_params: list[np.ndarray] | None = None
    best_metric: float | None = None
    history: list[EpochRecord] = []

    for epoch in range(train_cfg.max_epochs):
        running = 0.0
        for bi, idx in enumerate(
            batch_iter(np.arange(len(train)), train_cfg.batch_size, train_cfg.seed, epoch)
        ):
            imgs, meta, labels = train.batch(idx)
            loss = ops.cross_entropy(model(imgs, meta), labels)
            value = float(loss.data)
            if math.isnan(value) or math.isinf(value):
                raise TrainingFault(
                    f"non-finite training loss at epoch {epoch}, batch {bi}"
                )
            loss.backward()
            optimizer.step()
            running += value * len(idx)
        train_loss = running / len(train)

        val_loss, val_bcc = evaluate_loss_bcc(model, val, num_classes)
        monitored = val_loss if train_cfg.monitor == "val_loss" else val_bcc
        if _improved(monitored, best_metric, mode):
            best_metric = monitored
            best_params = [p.data.copy() for p in params]
        lr = scheduler.step(optimizer, monitored)
        history.append(EpochRecord(epoch, train_loss, val_loss, val_bcc, lr))
        if stopper.update(monitored, epoch):
            break

    if best_params is not None:
        for p, data in zip(params, best_params):
            p.data[...] = data
    return history
