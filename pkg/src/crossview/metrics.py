"""Classification metrics: accuracy and macro-averaged precision/recall/F1
with zero-division handled as 0 per class."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError


@dataclass
class MetricReport:
    accuracy: float = 0.0
    macro_f1: float = 0.0
    macro_precision: float = 0.0
    macro_recall: float = 0.0
    loss_curve: list[float] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "loss_curve": list(self.loss_curve),
        }


def compute_metrics(predictions, labels, n_classes: int) -> MetricReport:
    preds = np.asarray(predictions, dtype=np.int64)
    labs = np.asarray(labels, dtype=np.int64)
    if preds.shape != labs.shape:
        raise ContractError(f"predictions {preds.shape} vs labels {labs.shape}")
    if labs.size == 0:
        raise ContractError("no labels to score")
    if labs.min() < 0 or labs.max() >= n_classes:
        raise ContractError(f"label outside [0, {n_classes})")
    if preds.min() < 0 or preds.max() >= n_classes:
        raise ContractError(f"prediction outside [0, {n_classes})")

    accuracy = float((preds == labs).mean())
    precisions, recalls, f1s = [], [], []
    for c in range(n_classes):
        tp = int(((preds == c) & (labs == c)).sum())
        fp = int(((preds == c) & (labs != c)).sum())
        fn = int(((preds != c) & (labs == c)).sum())
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2.0 * p * r / (p + r) if p + r else 0.0
        precisions.append(p)
        recalls.append(r)
        f1s.append(f1)
    return MetricReport(
        accuracy=accuracy,
        macro_f1=float(np.mean(f1s)),
        macro_precision=float(np.mean(precisions)),
        macro_recall=float(np.mean(recalls)),
    )
