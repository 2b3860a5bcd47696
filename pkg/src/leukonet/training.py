"""Training loop, evaluation and checkpoint selection.

A run trains on every fold except ``val_fold``, evaluates on ``val_fold``
after each epoch, and keeps the parameters from the epoch with the best
validation accuracy. Batch-norm running statistics are recomputed after
each epoch from the un-augmented training images in a fixed order, so
evaluation reflects the current weights rather than a momentum average.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint
from .data.augment import AugmentConfig, augment
from .data.folds import FoldAssignment
from .data.manifest import ImageSet
from .data.sampling import epoch_plan
from .exceptions import ConfigError, ContractError, DivergenceError
from .metrics import MetricsReport, predict_labels
from .models import HybridModel, StageConfig, build_stage, parameter_digest
from .nn import BatchNorm2d, Linear, Module, softmax_cross_entropy
from .tensor import Rng, Tensor, default_dtype, no_grad

logger = logging.getLogger(__name__)

LOG_HEADER = "epoch,split,acc,f1_n,f1_c,loss"


@dataclass
class TrainConfig:
    learning_rate: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 32
    max_epochs: int = 30
    patience: int = 6
    seed: int = 0
    lr_decay: float = 0.1
    class_weight: tuple[float, float] | None = None
    precision: str = "float32"
    eval_batch_size: int = 100
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)
        if not (self.learning_rate >= 0 and math.isfinite(self.learning_rate)):
            raise ConfigError(f"learning_rate must be finite and >= 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2 for batch normalization, got {self.batch_size}")
        if self.max_epochs < 1 or self.patience < 1:
            raise ConfigError("max_epochs and patience must be >= 1")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError(f"lr_decay must lie in (0, 1], got {self.lr_decay}")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision}")
        if self.class_weight is not None:
            self.class_weight = tuple(float(w) for w in self.class_weight)
            if len(self.class_weight) != 2 or min(self.class_weight) <= 0:
                raise ConfigError(f"class_weight needs two positive weights, got {self.class_weight}")


class SGD:
    """Heavy-ball momentum: v <- mu v + g (+ wd p); p <- p - lr v."""

    def __init__(self, params, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            if self.lr:
                p.data -= (self.lr * v).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


@dataclass
class EpochRecord:
    epoch: int
    split: str
    accuracy: float
    f1_n: float
    f1_c: float
    loss: float

    def line(self) -> str:
        return f"{self.epoch},{self.split},{100 * self.accuracy:.4f},{100 * self.f1_n:.4f},{100 * self.f1_c:.4f},{self.loss:.6f}"


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[EpochRecord]
    best_epoch: int
    best_accuracy: float
    batch_losses: list[float] = field(default_factory=list)
    audit: dict = field(default_factory=dict)

    def log_text(self) -> str:
        return "\n".join([LOG_HEADER] + [r.line() for r in self.log]) + "\n"

    def write_log(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.log_text())
        return path

    def val_accuracies(self) -> list[float]:
        return [r.accuracy for r in self.log if r.split == "val"]


def split_indices(data: ImageSet, folds: FoldAssignment, val_fold: int) -> tuple[np.ndarray, np.ndarray]:
    if not 0 <= val_fold < folds.k:
        raise ConfigError(f"val_fold must lie in 0..{folds.k - 1}, got {val_fold}")
    missing = sorted({s for s in data.subjects if s not in folds.fold_of_subject})
    if missing:
        raise ConfigError(f"subjects without a fold: {missing[:5]}")
    fold_of = np.array([folds.fold_of_subject[s] for s in data.subjects])
    train_idx = np.flatnonzero(fold_of != val_fold)
    val_idx = np.flatnonzero(fold_of == val_fold)
    if len(train_idx) == 0 or len(val_idx) == 0:
        raise ConfigError(f"fold {val_fold} leaves an empty training or validation set")
    return train_idx, val_idx


def _batches(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


def _logits_in_batches(fn, images: np.ndarray, batch_size: int) -> np.ndarray:
    with no_grad():
        return np.concatenate([fn(Tensor(images[s].astype(np.float64))).data for s in _batches(len(images), batch_size)])


def _report(logits: np.ndarray, labels: np.ndarray, class_weight=None) -> MetricsReport:
    pred, ties = predict_labels(logits)
    loss = softmax_cross_entropy(Tensor(logits.astype(np.float64)), labels, class_weight).item()
    return MetricsReport.from_predictions(labels, pred, ties=ties, loss=loss)


def evaluate(model: Module, data: ImageSet, batch_size: int = 100, precision: str | None = None) -> MetricsReport:
    """Metrics of an eval-mode model on ``data``; touches no parameters or statistics."""
    if model.training:
        raise ContractError("evaluate needs an eval-mode model; call model.eval() first")
    if len(data) == 0:
        raise ContractError("cannot evaluate an empty dataset")
    dtype = precision or str(next(iter(model.parameters())).dtype)
    with default_dtype(dtype):
        logits = _logits_in_batches(model, data.images, batch_size)
    return _report(logits, data.labels)


def recalibrate_batchnorm(model: Module, images: np.ndarray, batch_size: int) -> None:
    """Replace BN running estimates with exact population statistics over ``images``."""
    norms = [m for m in model.modules() if isinstance(m, BatchNorm2d) and not m.frozen]
    if not norms:
        return
    was_training = model.training
    model.train()
    for m in norms:
        m.stats_sink = []
    usable = len(images) - len(images) % batch_size if len(images) % batch_size == 1 else len(images)
    with no_grad():
        for s in _batches(usable, batch_size):
            model(Tensor(images[s].astype(np.float64)))
    for m in norms:
        m.finalize_population_stats()
    model.train(was_training)


def _batch_images(data: ImageSet, entries, cfg: AugmentConfig, rng: Rng, epoch: int, offset: int) -> np.ndarray:
    out = np.empty((len(entries),) + data.images.shape[1:], dtype=np.float64)
    for j, e in enumerate(entries):
        img = data.images[e.index]
        out[j] = augment(img, cfg, rng.spawn(epoch, 2, offset + j)) if e.augment else img
    return out


def _check_finite(loss: float, epoch: int, lr: float) -> None:
    if not math.isfinite(loss):
        raise DivergenceError(f"loss became non-finite ({loss}) in epoch {epoch} at learning rate {lr:g}")


class _Plateau:
    """Best-accuracy tracking, step decay at patience/2 stale epochs, stop at patience."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -1.0
        self.best_epoch = 0
        self.stale = 0

    def update(self, acc: float, epoch: int) -> bool:
        if acc > self.best:
            self.best, self.best_epoch, self.stale = acc, epoch, 0
            return True
        self.stale += 1
        return False

    @property
    def decay_now(self) -> bool:
        half = max(self.patience // 2, 1)
        return self.stale > 0 and self.stale % half == 0 and self.stale < self.patience

    @property
    def stop(self) -> bool:
        return self.stale >= self.patience


def train(
    stage_cfg: StageConfig,
    train_cfg: TrainConfig,
    data: ImageSet,
    folds: FoldAssignment,
    val_fold: int = 0,
    log_path=None,
    model: Module | None = None,
) -> TrainResult:
    """Train a single-network stage (S1, S2 or S2C) and return its best checkpoint."""
    if stage_cfg.is_hybrid:
        raise ConfigError(f"{stage_cfg.stage} is a hybrid stage; use train_hybrid")
    aug_cfg = AugmentConfig(**{**asdict(train_cfg.augment), "mode": stage_cfg.augmentation_mode})
    train_idx, val_idx = split_indices(data, folds, val_fold)
    train_set, val_set = data.subset(train_idx), data.subset(val_idx)
    rng = Rng(train_cfg.seed)
    dtype = train_cfg.precision
    model = model or build_stage(stage_cfg, rng=rng.spawn(0))
    model.astype(dtype)
    opt = SGD(model.trainable_parameters(), train_cfg.learning_rate, train_cfg.momentum, train_cfg.weight_decay)
    plateau = _Plateau(train_cfg.patience)
    log, batch_losses = [], []
    best_state = model.state_dict()

    with default_dtype(dtype):
        for epoch in range(1, train_cfg.max_epochs + 1):
            t0 = time.perf_counter()
            model.train()
            plan = epoch_plan(train_set.labels, aug_cfg, rng.spawn(1, epoch))
            usable = len(plan) if len(plan) % train_cfg.batch_size != 1 else len(plan) - 1
            loss_sum, seen, preds, truth = 0.0, 0, [], []
            for s in _batches(usable, train_cfg.batch_size):
                entries = plan[s]
                x = _batch_images(train_set, entries, aug_cfg, rng.spawn(2), epoch, s.start)
                y = train_set.labels[[e.index for e in entries]]
                logits = model(Tensor(x))
                loss = softmax_cross_entropy(logits, y, train_cfg.class_weight)
                value = loss.item()
                _check_finite(value, epoch, opt.lr)
                opt.zero_grad()
                loss.backward()
                opt.step()
                for m in model.modules():
                    m.post_step()
                batch_losses.append(value)
                loss_sum += value * len(entries)
                seen += len(entries)
                preds.append(predict_labels(logits.data)[0])
                truth.append(y)
            train_report = MetricsReport.from_predictions(np.concatenate(truth), np.concatenate(preds), loss=loss_sum / seen)

            recalibrate_batchnorm(model, train_set.images, train_cfg.eval_batch_size)
            model.eval()
            val_report = evaluate(model, val_set, train_cfg.eval_batch_size, dtype)
            _check_finite(val_report.loss, epoch, opt.lr)
            for split, rep in (("train", train_report), ("val", val_report)):
                log.append(EpochRecord(epoch, split, rep.accuracy, rep.f1_normal, rep.f1_cancer, rep.loss))
            if log_path is not None:
                Path(log_path).write_text("\n".join([LOG_HEADER] + [r.line() for r in log]) + "\n")
            if plateau.update(val_report.accuracy, epoch):
                best_state = model.state_dict()
            logger.info(
                "%s epoch %d: train loss %.4f acc %.4f, val acc %.4f (best %.4f @ %d), lr %g, %.1fs",
                stage_cfg.stage, epoch, train_report.loss, train_report.accuracy, val_report.accuracy,
                plateau.best, plateau.best_epoch, opt.lr, time.perf_counter() - t0,
            )
            if plateau.stop:
                break
            if plateau.decay_now:
                opt.lr *= train_cfg.lr_decay

    model.load_state_dict(best_state)
    meta = {
        "best_epoch": plateau.best_epoch, "val_accuracy": plateau.best, "val_fold": val_fold,
        "seed": train_cfg.seed, "precision": dtype,
    }
    ckpt = Checkpoint.from_model(model.eval(), meta)
    return TrainResult(ckpt, log, plateau.best_epoch, plateau.best, batch_losses)


def _features_in_batches(model: HybridModel, images: np.ndarray, batch_size: int) -> np.ndarray:
    with no_grad():
        return np.concatenate(
            [model.component_features(Tensor(images[s].astype(np.float64))).data for s in _batches(len(images), batch_size)]
        )


def train_hybrid(
    stage_cfg: StageConfig,
    components,
    train_cfg: TrainConfig,
    data: ImageSet,
    folds: FoldAssignment,
    val_fold: int = 0,
    log_path=None,
) -> TrainResult:
    """Train only the fusion layer on top of two frozen component checkpoints.

    Without augmentation the frozen features are computed once and reused
    every epoch; the result is the same as recomputing them.
    """
    if not stage_cfg.is_hybrid:
        raise ConfigError(f"{stage_cfg.stage} is not a hybrid stage; use train")
    rng = Rng(train_cfg.seed)
    dtype = train_cfg.precision
    model = build_stage(stage_cfg, components, rng=rng.spawn(0))
    model.astype(dtype)
    aug_cfg = AugmentConfig(**{**asdict(train_cfg.augment), "mode": stage_cfg.augmentation_mode})
    train_idx, val_idx = split_indices(data, folds, val_fold)
    train_set, val_set = data.subset(train_idx), data.subset(val_idx)

    frozen_before = {"first": parameter_digest(model, "first."), "second": parameter_digest(model, "second.")}
    fusion_before = parameter_digest(model, "fusion.")
    fusion: Linear = model.fusion
    opt = SGD(model.trainable_parameters(), train_cfg.learning_rate, train_cfg.momentum, train_cfg.weight_decay)
    plateau = _Plateau(train_cfg.patience)
    log, batch_losses = [], []
    best_state = model.state_dict()

    with default_dtype(dtype):
        model.train()
        train_feats = None if aug_cfg.mode != "none" else _features_in_batches(model, train_set.images, train_cfg.eval_batch_size)
        val_feats = _features_in_batches(model, val_set.images, train_cfg.eval_batch_size)
        for epoch in range(1, train_cfg.max_epochs + 1):
            model.train()
            plan = epoch_plan(train_set.labels, aug_cfg, rng.spawn(1, epoch))
            usable = len(plan) if len(plan) % train_cfg.batch_size != 1 else len(plan) - 1
            loss_sum, seen, preds, truth = 0.0, 0, [], []
            for s in _batches(usable, train_cfg.batch_size):
                entries = plan[s]
                idx = [e.index for e in entries]
                if train_feats is not None:
                    feats = Tensor(train_feats[idx])
                else:
                    x = _batch_images(train_set, entries, aug_cfg, rng.spawn(2), epoch, s.start)
                    feats = model.component_features(Tensor(x))
                y = train_set.labels[idx]
                logits = fusion(feats)
                loss = softmax_cross_entropy(logits, y, train_cfg.class_weight)
                value = loss.item()
                _check_finite(value, epoch, opt.lr)
                opt.zero_grad()
                loss.backward()
                opt.step()
                batch_losses.append(value)
                loss_sum += value * len(entries)
                seen += len(entries)
                preds.append(predict_labels(logits.data)[0])
                truth.append(y)
            train_report = MetricsReport.from_predictions(np.concatenate(truth), np.concatenate(preds), loss=loss_sum / seen)
            model.eval()
            with no_grad():
                val_logits = np.concatenate([fusion(Tensor(val_feats[s])).data for s in _batches(len(val_feats), train_cfg.eval_batch_size)])
            val_report = _report(val_logits, val_set.labels)
            _check_finite(val_report.loss, epoch, opt.lr)
            for split, rep in (("train", train_report), ("val", val_report)):
                log.append(EpochRecord(epoch, split, rep.accuracy, rep.f1_normal, rep.f1_cancer, rep.loss))
            if log_path is not None:
                Path(log_path).write_text("\n".join([LOG_HEADER] + [r.line() for r in log]) + "\n")
            if plateau.update(val_report.accuracy, epoch):
                best_state = model.state_dict()
            logger.info(
                "%s epoch %d: train loss %.4f acc %.4f, val acc %.4f (best %.4f @ %d)",
                stage_cfg.stage, epoch, train_report.loss, train_report.accuracy, val_report.accuracy,
                plateau.best, plateau.best_epoch,
            )
            if plateau.stop:
                break
            if plateau.decay_now:
                opt.lr *= train_cfg.lr_decay

    model.load_state_dict(best_state)
    audit = {
        "first_before": frozen_before["first"], "first_after": parameter_digest(model, "first."),
        "second_before": frozen_before["second"], "second_after": parameter_digest(model, "second."),
        "fusion_before": fusion_before, "fusion_after": parameter_digest(model, "fusion."),
    }
    meta = {
        "best_epoch": plateau.best_epoch, "val_accuracy": plateau.best, "val_fold": val_fold,
        "seed": train_cfg.seed, "precision": dtype,
    }
    ckpt = Checkpoint.from_model(model.eval(), meta)
    return TrainResult(ckpt, log, plateau.best_epoch, plateau.best, batch_losses, audit)
