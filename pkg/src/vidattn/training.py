"""Training protocol: cross-entropy, SGD with momentum, class-balancing
oversampling, and early stopping on validation accuracy."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ContractError, TrainingError
from .optim import SgdMomentum

__all__ = ["TrainConfig", "FitResult", "EvalResult", "cross_entropy_loss",
           "make_epoch_schedule", "fit", "evaluate"]


@dataclass
class TrainConfig:
    lr: float = 0.0001
    momentum: float = 0.9
    weight_decay: float = 0.0001
    epochs: int = 150
    batch_size: int = 4
    patience: int = 15
    oversample: bool = True
    seed: int = 0


@dataclass
class FitResult:
    history: list
    best_epoch: int
    best_val_accuracy: float


@dataclass
class EvalResult:
    accuracy: float
    confusion: np.ndarray  # rows = true class, columns = predicted


def cross_entropy_loss(logits, label):
    """Scalar -log softmax(logits)[label] on plain arrays."""
    return float(ad.cross_entropy(ad.constant(logits), label).data)


def make_epoch_schedule(counts, oversample, seed):
    """Ordered list of (class_index, sample_index) pairs for one epoch.

    With oversampling every class contributes exactly the majority-class
    count: all of its samples once, plus extras drawn with replacement.
    """
    counts = list(counts)
    if any(c <= 0 for c in counts):
        raise ContractError(f"every class needs at least one sample, got {counts}")
    rng = np.random.default_rng(seed)
    entries = []
    if oversample:
        majority = max(counts)
        for cls, count in enumerate(counts):
            picks = list(range(count))
            if count < majority:
                picks += list(rng.choice(count, majority - count, replace=True))
            entries += [(cls, int(j)) for j in picks]
    else:
        entries = [(cls, j) for cls, count in enumerate(counts)
                   for j in range(count)]
    order = rng.permutation(len(entries))
    return [entries[i] for i in order]


def _class_index(dataset):
    by_class = {}
    for i, clip in enumerate(dataset):
        by_class.setdefault(clip.label, []).append(i)
    return by_class


def fit(train_set, val_set, model, cfg: TrainConfig):
    """Train in place and leave the best-validation-accuracy weights loaded.

    Ties on validation accuracy keep the earliest epoch. Early stopping ends
    training once ``cfg.patience`` epochs pass without a new best.
    """
    if not train_set or not val_set:
        raise ContractError("train and validation sets must be non-empty")
    by_class = _class_index(train_set)
    classes = sorted(by_class)
    counts = [len(by_class[c]) for c in classes]
    params = model.parameters()
    names = list(params)
    optimizer = SgdMomentum(cfg.lr, cfg.momentum, cfg.weight_decay)

    history = []
    best_acc = -1.0
    best_epoch = -1
    best_weights = None
    for epoch in range(cfg.epochs):
        schedule = make_epoch_schedule(counts, cfg.oversample,
                                       seed=cfg.seed * 100003 + epoch)
        losses = []
        for start in range(0, len(schedule), cfg.batch_size):
            batch = schedule[start:start + cfg.batch_size]
            grad_sums = None
            for cls, j in batch:
                clip = train_set[by_class[classes[cls]][j]]
                tape = ad.Tape()
                loss = ad.cross_entropy(model.forward(tape, clip.frames),
                                        clip.label)
                if not np.isfinite(loss.data):
                    raise TrainingError("loss is not finite", epoch)
                losses.append(float(loss.data))
                tape.backward(loss)
                grads = [tape.grad(params[n]) for n in names]
                if grad_sums is None:
                    grad_sums = grads
                else:
                    for acc, g in zip(grad_sums, grads):
                        acc += g
            scale = 1.0 / len(batch)
            optimizer.step([params[n] for n in names],
                           [g * scale for g in grad_sums])
        correct = sum(model.predict(clip.frames) == clip.label
                      for clip in val_set)
        val_acc = correct / len(val_set)
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)),
                        "val_accuracy": val_acc})
        if val_acc > best_acc:
            best_acc = val_acc
            best_epoch = epoch
            best_weights = {n: arr.copy() for n, arr in params.items()}
        if epoch - best_epoch >= cfg.patience:
            break
    for n, arr in best_weights.items():
        params[n][...] = arr
    return FitResult(history=history, best_epoch=best_epoch,
                     best_val_accuracy=best_acc)


def evaluate(test_set, model):
    """Clip-level accuracy plus a confusion matrix with true-class rows."""
    if not test_set:
        raise ContractError("test set is empty")
    k = max(clip.label for clip in test_set) + 1
    k = max(k, getattr(model, "config", None).num_classes
            if getattr(model, "config", None) else k)
    confusion = np.zeros((k, k), dtype=np.int64)
    for clip in test_set:
        confusion[clip.label, model.predict(clip.frames)] += 1
    accuracy = float(np.trace(confusion)) / len(test_set)
    return EvalResult(accuracy=accuracy, confusion=confusion)
