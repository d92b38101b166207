"""Class-exclusion filters for attacker data pools."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..nn.functional import softmax_np
from .data import DatasetSplit

CONFIDENCE_THRESHOLD = 0.10


@dataclass(frozen=True)
class ExclusionFilter:
    classes: tuple[int, ...]
    mode: str = "by-label"  # or "by-confidence"
    threshold: float = CONFIDENCE_THRESHOLD

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(sorted(set(int(k) for k in self.classes))))
        if self.mode not in ("by-label", "by-confidence"):
            raise ValueError(f"unknown filter mode {self.mode!r}")
        if any(not 0 <= k < 10 for k in self.classes):
            raise ValueError("excluded classes must lie in 0..9")

    @property
    def name(self) -> str:
        return f"FMNIST-{len(self.classes)}" + ("S" if self.mode == "by-confidence" else "")


def victim_probs(victim, images: np.ndarray, batch_size: int = 1000) -> np.ndarray:
    return softmax_np(victim.logits(images, batch_size))


def keep_mask(split: DatasetSplit, filt: ExclusionFilter, victim=None) -> np.ndarray:
    if not filt.classes:
        return np.ones(len(split), dtype=bool)
    if filt.mode == "by-label":
        return ~np.isin(split.labels, filt.classes)
    if victim is None:
        raise ValueError("by-confidence filtering needs the victim model")
    probs = victim_probs(victim, split.images)
    return ~(probs[:, list(filt.classes)] > filt.threshold).any(axis=1)


def apply_filter(split: DatasetSplit, filt: ExclusionFilter, victim=None) -> DatasetSplit:
    """Drop samples labeled in K (by-label) or given > threshold victim confidence on K (by-confidence)."""
    return split.subset(keep_mask(split, filt, victim), f"{split.provenance}/{filt.name}")
