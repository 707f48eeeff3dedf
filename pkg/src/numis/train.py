"""Losses, SGD with momentum, the epoch loop and evaluation."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import ModelCheckpoint, save_checkpoint
from .metrics import ConceptMetrics, concept_metrics, mean_accuracy
from .nn import Model
from .tensor import ShapeError, Tensor

log = logging.getLogger(__name__)

PROB_EPS = 1e-7
EARLY_STOP_PATIENCE = 30


class NonFiniteLossError(ArithmeticError):
    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


# -- losses --------------------------------------------------------------------
def bce_loss(p: Tensor, y, weights=None, eps: float = PROB_EPS) -> Tensor:
    """Weighted binary cross-entropy, averaged over every element of ``p``.

    The positive term of label ``c`` is multiplied by ``weights[c]``. The
    textbook form y·log x + (1-y)·log(1-x) is negated so that the loss is
    nonnegative and minimized at p == y.
    """
    if not 0 < eps <= 0.01:
        raise ValueError(f"clamp eps must lie in (0, 0.01], got {eps}")
    y = np.asarray(y, dtype=np.float64)
    if y.shape != p.shape:
        raise ShapeError(f"bce_loss: probabilities {p.shape} vs labels {y.shape}")
    w = np.ones(p.shape[-1] if p.ndim else 1) if weights is None else np.asarray(weights, dtype=np.float64)
    if np.any(w <= 0):
        raise ValueError("positive weights must be > 0")
    pv = p.data.astype(np.float64)
    pc = np.clip(pv, eps, 1 - eps)
    n = pv.size
    terms = w * y * np.log(pc) + (1 - y) * np.log(1 - pc)
    out = np.asarray(-terms.sum() / n, dtype=p.dtype)

    def backward(g):
        live = (pv > eps) & (pv < 1 - eps)
        dp = -(w * y / pc - (1 - y) / (1 - pc)) / n
        return ((p, g * dp * live),)

    return T.custom_op(out, (p,), backward, "bce")


def cross_entropy(logits: Tensor, classes) -> Tensor:
    """Mean of -log softmax(logits)[class] over a (B, K) batch."""
    cls = np.asarray(classes, dtype=np.int64).reshape(-1)
    z = logits.data.astype(np.float64)
    if z.ndim == 1:
        z = z[None]
    if z.shape[0] != cls.shape[0]:
        raise ShapeError(f"cross_entropy: {z.shape[0]} rows vs {cls.shape[0]} targets")
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    rows = np.arange(len(cls))
    out = np.asarray(-logp[rows, cls].mean(), dtype=logits.dtype)

    def backward(g):
        d = np.exp(logp)
        d[rows, cls] -= 1.0
        return ((logits, (g * d / len(cls)).reshape(logits.shape)),)

    return T.custom_op(out, (logits,), backward, "cross_entropy")


# -- optimizer -------------------------------------------------------------------
class SgdMomentum:
    """v <- mu*v + g ; w <- w - lr*v. Frozen parameters get no velocity buffer."""

    def __init__(self, lr: float, momentum: float = 0.9):
        if lr < 0 or not 0 <= momentum < 1:
            raise ValueError(f"bad optimizer settings lr={lr} momentum={momentum}")
        self.lr = lr
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, named_params) -> None:
        for name, p in named_params:
            if not p.requires_grad:
                continue
            if p.grad is None:
                raise ValueError(f"parameter {name} is trainable but has no gradient")
            v = self.velocity.get(name)
            v = p.grad.astype(np.float32) if v is None else self.momentum * v + p.grad
            self.velocity[name] = v
            p.data = (p.data - self.lr * v).astype(np.float32)


def sgd_step(named_params, state: SgdMomentum) -> None:
    state.step(named_params)


# -- datasets ---------------------------------------------------------------------
@dataclass
class LabeledImages:
    """In-memory images (n, H, W) in [0, 1] with (n, C) binary labels."""

    images: np.ndarray
    labels: np.ndarray
    concepts: list[str]
    ids: list[str] | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(len(self.images), -1 if len(self.images) else len(self.concepts))
        if self.labels.shape[1] != len(self.concepts):
            raise ValueError(f"{self.labels.shape[1]} label columns for {len(self.concepts)} concepts")

    def __len__(self) -> int:
        return len(self.images)


@dataclass
class Schedule:
    lr: float = 1e-4
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 20
    patience: int | None = None
    seed: int = 0


class EarlyStopping:
    """Stops once validation loss has not strictly improved for ``patience`` epochs."""

    def __init__(self, patience: int = EARLY_STOP_PATIENCE):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = -1
        self.epoch = -1

    def update(self, val_loss: float) -> bool:
        self.epoch += 1
        if val_loss < self.best:
            self.best = val_loss
            self.best_epoch = self.epoch
        return self.epoch - self.best_epoch >= self.patience


@dataclass
class TrainResult:
    checkpoints: list[ModelCheckpoint]
    best_index: int
    history: list[dict] = field(default_factory=list)

    @property
    def best(self) -> ModelCheckpoint:
        return self.checkpoints[self.best_index]


def objective_for(model: Model) -> str:
    return "ce" if model.kind == "cnn" else "bce"


def batch_loss(model: Model, images: np.ndarray, labels: np.ndarray, pos_weights=None) -> Tensor:
    logits = model.forward(images)
    if objective_for(model) == "ce":
        return cross_entropy(logits, labels[:, 0])
    return bce_loss(T.sigmoid(logits), labels, pos_weights)


def predict_logits(model: Model, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    outs = [model.forward(images[i : i + batch_size]).data for i in range(0, len(images), batch_size)]
    return np.concatenate(outs, axis=0) if outs else np.zeros((0, 0), np.float32)


def decide(model: Model, logits: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Binary decisions: sigmoid threshold for multi-label heads, argmax for two-logit heads."""
    if objective_for(model) == "ce":
        return (logits.argmax(axis=1) == 1).astype(np.int64)[:, None]
    probs = 0.5 * (1.0 + np.tanh(0.5 * logits.astype(np.float64)))  # sigmoid without overflow
    return (probs >= threshold).astype(np.int64)


def dataset_loss(model: Model, data: LabeledImages, pos_weights=None, batch_size: int = 64) -> float:
    logits = predict_logits(model, data.images, batch_size)
    z = Tensor(logits)
    if objective_for(model) == "ce":
        return float(cross_entropy(z, data.labels[:, 0]).data)
    return float(bce_loss(T.sigmoid(z), data.labels, pos_weights).data)


def evaluate(model: Model, data: LabeledImages, threshold: float = 0.5, batch_size: int = 64) -> dict[str, ConceptMetrics]:
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty view")
    logits = predict_logits(model, data.images, batch_size)
    return concept_metrics(decide(model, logits, threshold), data.labels, data.concepts)


def _stats(model, data, pos_weights, split):
    loss = dataset_loss(model, data, pos_weights)
    m = evaluate(model, data)
    return {
        "loss": loss,
        "accuracy": mean_accuracy(m),
        "concepts": {c: v.as_dict() for c, v in m.items()},
    }, m


LOG_FIELDS = ["epoch", "split", "loss", "concept", "acc", "prec", "rec", "f1", "tp", "fp", "tn", "fn"]


def _log_rows(epoch: int, split: str, stats: dict):
    for c, m in stats["concepts"].items():
        yield [epoch, split, f"{stats['loss']:.6g}", c] + [
            "" if m[k] is None else f"{m[k]:.6g}" for k in ("accuracy", "precision", "recall", "f1")
        ] + [m[k] for k in ("tp", "fp", "tn", "fn")]


def train(
    model: Model,
    train_set: LabeledImages,
    val_set: LabeledImages | None,
    schedule: Schedule,
    pos_weights=None,
    checkpoint_dir=None,
    log_path=None,
) -> TrainResult:
    """Epoch loop: seeded shuffle, SGD steps, validation, one checkpoint per epoch.

    With ``schedule.patience`` set, training stops after that many epochs
    without a strictly lower validation loss. The best checkpoint is the one
    with the lowest validation loss (training loss when no validation set).
    """
    n = len(train_set)
    if n == 0:
        raise ValueError("training set is empty")
    if val_set is not None and train_set.ids and val_set.ids and set(train_set.ids) & set(val_set.ids):
        raise ValueError("training and validation views overlap")
    rng = np.random.default_rng(schedule.seed)
    opt = SgdMomentum(schedule.lr, schedule.momentum)
    stopper = EarlyStopping(schedule.patience) if schedule.patience else None
    checkpoints: list[ModelCheckpoint] = []
    history: list[dict] = []
    writer = None
    log_file = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        log_file = open(log_path, "w", newline="")
        writer = csv.writer(log_file, lineterminator="\n")
        writer.writerow(LOG_FIELDS)
    best_loss = math.inf
    best_index = 0
    try:
        for epoch in range(schedule.epochs):
            order = rng.permutation(n)
            total = 0.0
            for b, start in enumerate(range(0, n, schedule.batch_size)):
                idx = order[start : start + schedule.batch_size]
                loss = batch_loss(model, train_set.images[idx], train_set.labels[idx], pos_weights)
                value = float(loss.data)
                if not math.isfinite(value):
                    raise NonFiniteLossError(epoch, b, value)
                model.zero_grad()
                loss.backward()
                opt.step(model.trainable())
                total += value * len(idx)
            train_stats, _ = _stats(model, train_set, pos_weights, "train")
            train_stats["batch_loss"] = total / n
            stats = {"train": train_stats}
            if val_set is not None and len(val_set):
                stats["val"], _ = _stats(model, val_set, pos_weights, "val")
            monitored = stats["val"]["loss"] if "val" in stats else train_stats["loss"]
            if not math.isfinite(monitored):
                raise NonFiniteLossError(epoch, -1, monitored)
            ckpt = ModelCheckpoint(
                epoch=epoch,
                params=model.state_dict(),
                stats=stats,
                model={"kind": model.kind, "config": model.config_dict(), "concepts": list(train_set.concepts)},
            )
            checkpoints.append(ckpt)
            history.append({"epoch": epoch, **{k: v["loss"] for k, v in stats.items()}})
            if checkpoint_dir is not None:
                save_checkpoint(ckpt, Path(checkpoint_dir) / f"epoch-{epoch:04d}.ckpt")
            if writer is not None:
                for split, s in stats.items():
                    writer.writerows(_log_rows(epoch, split, s))
            if monitored < best_loss:
                best_loss, best_index = monitored, len(checkpoints) - 1
            log.info("epoch %d train_loss=%.4f monitored=%.4f", epoch, train_stats["loss"], monitored)
            if stopper is not None and stopper.update(monitored):
                log.info("early stop after epoch %d (best %d)", epoch, stopper.best_epoch)
                break
    finally:
        if log_file is not None:
            log_file.close()
    return TrainResult(checkpoints, best_index, history)
