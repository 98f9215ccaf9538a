"""Class-wise F-scores over node predictions with known correspondence."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # (B, B) int64, rows = true class, cols = predicted

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion_matrix(preds, labels, num_classes: int) -> ConfusionMatrix:
    preds = np.asarray(preds, dtype=np.intp)
    labels = np.asarray(labels, dtype=np.intp)
    if preds.shape != labels.shape:
        raise ContractError(f"length mismatch: {preds.shape} predictions, {labels.shape} labels")
    for name, arr in (("prediction", preds), ("label", labels)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ContractError(f"{name} ids must be in 0..{num_classes - 1}")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (labels, preds), 1)
    return ConfusionMatrix(counts=counts)


def fscores_from_confusion(cm: ConfusionMatrix):
    """Per-class F1 and their unweighted mean.

    A class absent from both truth and prediction scores 0, deliberately
    dragging the average down rather than being skipped.
    """
    c = cm.counts
    tp = np.diag(c).astype(np.float64)
    fp = c.sum(axis=0) - tp
    fn = c.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(tp + fp > 0, tp / (tp + fp), 0.0)
        recall = np.where(tp + fn > 0, tp / (tp + fn), 0.0)
        f1 = np.where(precision + recall > 0, 2 * precision * recall / (precision + recall), 0.0)
    return f1, float(f1.mean())


def fscores(preds, labels, num_classes: int):
    """(per-class F1, F_avg) for integer class predictions."""
    return fscores_from_confusion(confusion_matrix(preds, labels, num_classes))


def format_report(per_class: np.ndarray, f_avg: float, cm: ConfusionMatrix) -> str:
    """Stable plain-text report: per-class F, the average, and the raw
    confusion counts (rows = true class)."""
    lines = []
    for b, f in enumerate(per_class):
        lines.append(f"F[class {b}]\t{f:.6f}")
    lines.append(f"F_avg\t{f_avg:.6f}")
    lines.append("confusion_matrix (rows=true, cols=pred)")
    for row in cm.counts:
        lines.append("\t".join(str(int(v)) for v in row))
    return "\n".join(lines) + "\n"
