"""Confusion matrix, accuracy, macro-F1 and Cohen's kappa."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, DomainError


def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise DimensionError(f"labels {y_true.shape} and predictions {y_pred.shape} differ in shape")
    if num_classes < 2:
        raise DomainError("a confusion matrix needs at least two classes")
    for arr in (y_true, y_pred):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise DomainError(f"label outside [0, {num_classes})")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def _checked(cm) -> np.ndarray:
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1] or cm.shape[0] < 2:
        raise DimensionError(f"confusion matrix must be K x K with K >= 2, got {cm.shape}")
    if (cm < 0).any():
        raise DomainError("confusion matrix has negative counts")
    if cm.sum() == 0:
        raise DomainError("confusion matrix is empty")
    return cm.astype(np.float64)


def accuracy(cm) -> float:
    cm = _checked(cm)
    return float(np.trace(cm) / cm.sum())


def per_class_scores(cm) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Precision, recall and F1 per class; zero where a denominator vanishes."""
    cm = _checked(cm)
    tp = np.diag(cm)
    predicted = cm.sum(axis=0)
    actual = cm.sum(axis=1)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = np.divide(tp, actual, out=np.zeros_like(tp), where=actual > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    # undefined precision or recall scores the class as 0
    f1[(predicted == 0) | (actual == 0)] = 0.0
    return precision, recall, f1


def macro_f1(cm) -> float:
    return float(per_class_scores(cm)[2].mean())


def chance_agreement(cm) -> float:
    cm = _checked(cm)
    total = cm.sum()
    return float((cm.sum(axis=1) / total) @ (cm.sum(axis=0) / total))


def cohen_kappa(cm) -> float:
    p_o = accuracy(cm)
    p_e = chance_agreement(cm)
    if p_e == 1.0:
        return 1.0 if p_o == 1.0 else 0.0
    return (p_o - p_e) / (1.0 - p_e)


@dataclass(frozen=True)
class MetricsReport:
    confusion: np.ndarray
    acc: float
    mf1: float
    kappa: float
    precision: tuple
    recall: tuple
    f1: tuple

    @classmethod
    def from_confusion(cls, cm) -> "MetricsReport":
        cm = np.asarray(cm, dtype=np.int64)
        p, r, f = per_class_scores(cm)
        return cls(cm, accuracy(cm), macro_f1(cm), cohen_kappa(cm), tuple(p), tuple(r), tuple(f))

    @classmethod
    def from_labels(cls, y_true, y_pred, num_classes: int) -> "MetricsReport":
        return cls.from_confusion(confusion_matrix(y_true, y_pred, num_classes))

    @property
    def num_classes(self) -> int:
        return self.confusion.shape[0]

    def to_dict(self) -> dict:
        return {
            "acc": round(self.acc, 6), "mf1": round(self.mf1, 6), "kappa": round(self.kappa, 6),
            "precision": [round(v, 6) for v in self.precision],
            "recall": [round(v, 6) for v in self.recall],
            "f1": [round(v, 6) for v in self.f1],
            "confusion": self.confusion.tolist(),
        }

    def to_text(self) -> str:
        """Diff-stable text form; reals in 6-decimal fixed point."""
        lines = [
            f"classes {self.num_classes}",
            f"samples {int(self.confusion.sum())}",
            f"acc {self.acc:.6f}",
            f"mf1 {self.mf1:.6f}",
            f"kappa {self.kappa:.6f}",
        ]
        for k in range(self.num_classes):
            lines.append(f"class {k} precision {self.precision[k]:.6f} "
                         f"recall {self.recall[k]:.6f} f1 {self.f1[k]:.6f}")
        for k, row in enumerate(self.confusion):
            lines.append(f"confusion {k} " + " ".join(str(int(v)) for v in row))
        return "\n".join(lines) + "\n"
