"""Confusion counts and the per-concept statistics reported for each model."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be nonnegative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @classmethod
    def from_predictions(cls, predicted, actual) -> "ConfusionMatrix":
        p = np.asarray(predicted).astype(bool)
        a = np.asarray(actual).astype(bool)
        if p.shape != a.shape:
            raise ValueError(f"prediction shape {p.shape} != label shape {a.shape}")
        return cls(
            tp=int(np.sum(p & a)),
            fp=int(np.sum(p & ~a)),
            tn=int(np.sum(~p & ~a)),
            fn=int(np.sum(~p & a)),
        )


def _ratio(num: int, den: int) -> float | None:
    return None if den == 0 else num / den


@dataclass(frozen=True)
class ConceptMetrics:
    accuracy: float | None
    precision: float | None
    recall: float | None
    f1: float | None
    confusion: ConfusionMatrix

    @classmethod
    def from_confusion(cls, cm: ConfusionMatrix) -> "ConceptMetrics":
        precision = _ratio(cm.tp, cm.tp + cm.fp)
        recall = _ratio(cm.tp, cm.tp + cm.fn)
        if precision is None or recall is None or precision + recall == 0:
            f1 = None
        else:
            f1 = 2 * precision * recall / (precision + recall)
        return cls(_ratio(cm.tp + cm.tn, cm.total), precision, recall, f1, cm)

    def as_dict(self) -> dict:
        d = asdict(self)
        d.update(d.pop("confusion"))
        return d


def concept_metrics(predicted: np.ndarray, actual: np.ndarray, concepts: list[str]) -> dict[str, ConceptMetrics]:
    """Per-column metrics for (n, C) binary prediction and label matrices."""
    predicted = np.asarray(predicted).reshape(len(predicted), -1)
    actual = np.asarray(actual).reshape(len(actual), -1)
    if predicted.shape != actual.shape or predicted.shape[1] != len(concepts):
        raise ValueError(f"shapes {predicted.shape}/{actual.shape} do not match {len(concepts)} concepts")
    return {
        c: ConceptMetrics.from_confusion(ConfusionMatrix.from_predictions(predicted[:, j], actual[:, j]))
        for j, c in enumerate(concepts)
    }


def mean_accuracy(metrics: dict[str, ConceptMetrics]) -> float:
    accs = [m.accuracy for m in metrics.values() if m.accuracy is not None]
    return float(np.mean(accs)) if accs else float("nan")
