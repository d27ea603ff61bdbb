"""Dice and cross-entropy losses; DSC / Jaccard / precision / recall metrics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

DICE_EPS = 1e-5


def _check_binary(target: np.ndarray, what: str = "target") -> None:
    if not np.all((target == 0) | (target == 1)):
        raise ValueError(f"{what} must be binary (0/1)")


def dice_loss(pred: Tensor, target, eps: float = DICE_EPS) -> Tensor:
    """1 - (2 Σ p·t + eps) / (Σ p + Σ t + eps), pooled over every element."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    target = np.asarray(target.data if isinstance(target, Tensor) else target)
    _check_binary(target)
    if target.size != pred.size:
        raise ValueError(f"dice_loss: pred has {pred.size} elements, target {target.size}")
    p = T.reshape(pred, (-1,))
    t = T.Tensor(target.reshape(-1), dtype=pred.dtype)
    inter = T.sum_(p * t)
    denom = T.sum_(p) + float(t.data.sum()) + eps
    return 1.0 - (2.0 * inter + eps) / denom


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean of -log softmax(logits)[label] over the batch; accepts [2] or [B, 2] logits."""
    if logits.ndim == 1:
        logits = T.reshape(logits, (1, -1))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.shape[0] != logits.shape[0]:
        raise ValueError(f"{labels.shape[0]} labels for {logits.shape[0]} logit rows")
    logp = T.log_softmax(logits)
    picked = T.getitem(logp, (np.arange(labels.shape[0]), labels))
    return -T.mean(picked)


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @classmethod
    def from_masks(cls, pred, target) -> "ConfusionCounts":
        pred = np.asarray(pred)
        target = np.asarray(target)
        if pred.shape != target.shape:
            raise ValueError(f"mask shapes differ: {pred.shape} vs {target.shape}")
        _check_binary(pred, "prediction")
        _check_binary(target)
        p = pred.astype(bool)
        t = target.astype(bool)
        tp = int(np.count_nonzero(p & t))
        fp = int(np.count_nonzero(p & ~t))
        fn = int(np.count_nonzero(~p & t))
        return cls(tp, fp, fn, p.size - tp - fp - fn)

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def metrics(self) -> dict[str, float]:
        return metrics_from_counts(self)


def _ratio(num: int, den: int, empty: float) -> float:
    return num / den if den else empty


def metrics_from_counts(c: ConfusionCounts) -> dict[str, float]:
    # Nothing predicted and nothing to find counts as perfect; otherwise a zero
    # denominator means the prediction missed entirely.
    target_empty = c.tp + c.fn == 0
    pred_empty = c.tp + c.fp == 0
    perfect_negative = 1.0 if (target_empty and pred_empty) else 0.0
    return {
        "dsc": _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, perfect_negative),
        "jaccard": _ratio(c.tp, c.tp + c.fp + c.fn, perfect_negative),
        "precision": _ratio(c.tp, c.tp + c.fp, 1.0 if target_empty else 0.0),
        "recall": _ratio(c.tp, c.tp + c.fn, 1.0 if pred_empty else 0.0),
    }


def segmentation_metrics(pred_mask, target_mask) -> dict[str, float]:
    return ConfusionCounts.from_masks(pred_mask, target_mask).metrics()


def classification_accuracy(preds, labels) -> float:
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.size == 0:
        raise ValueError("classification_accuracy of an empty set")
    if preds.shape != labels.shape:
        raise ValueError(f"length mismatch: {preds.shape} vs {labels.shape}")
    return float(np.mean(preds == labels))
