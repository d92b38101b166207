"""Recall and precision restricted to excluded classes."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ExclusionMetrics:
    recall: float | None
    precision: float | None  # None when nothing was predicted in K
    support: int
    predicted: int

    def as_dict(self) -> dict:
        return {"recall": self.recall, "precision": self.precision, "support": self.support,
                "predicted": self.predicted}


def exclusion_metrics(predictions: np.ndarray, labels: np.ndarray, classes) -> ExclusionMetrics:
    classes = list(classes)
    if not classes:
        raise ValueError("excluded class set must be nonempty")
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    in_k = np.isin(labels, classes)
    pred_k = np.isin(predictions, classes)
    correct = int(((predictions == labels) & in_k).sum())
    support, predicted = int(in_k.sum()), int(pred_k.sum())
    return ExclusionMetrics(recall=correct / support if support else None,
                            precision=correct / predicted if predicted else None,
                            support=support, predicted=predicted)


def excluded_class_metrics(attacker, images: np.ndarray, labels: np.ndarray, classes) -> ExclusionMetrics:
    return exclusion_metrics(attacker.logits(images, 1000).argmax(axis=1), labels, classes)
