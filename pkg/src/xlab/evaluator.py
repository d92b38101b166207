"""Transfer-set window statistics, observations and rewards for the controller."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn.functional import cross_entropy_rows


class TransferSet:
    """Append-only store of (query image, victim soft label) pairs in query order."""

    def __init__(self, capacity: int, image_shape: tuple[int, ...], num_classes: int):
        self.capacity = int(capacity)
        self.images = np.zeros((self.capacity, *image_shape), dtype=np.float32)
        self.labels = np.zeros((self.capacity, num_classes), dtype=np.float32)
        self._n = 0

    def __len__(self) -> int:
        return self._n

    def append(self, image: np.ndarray, label: np.ndarray) -> None:
        if self._n >= self.capacity:
            raise OverflowError(f"transfer set is full ({self.capacity} entries)")
        self.images[self._n] = image
        self.labels[self._n] = label
        self._n += 1

    def window(self, size: int) -> tuple[np.ndarray, np.ndarray]:
        """The most recent ``min(size, len)`` pairs (all of them before warm-up)."""
        lo = max(0, self._n - size)
        return self.images[lo:self._n], self.labels[lo:self._n]

    def all(self) -> tuple[np.ndarray, np.ndarray]:
        return self.images[:self._n], self.labels[:self._n]


@dataclass(frozen=True)
class WindowStats:
    mean: np.ndarray      # per-class mean victim probability over the window
    std: np.ndarray       # per-class population std of victim probabilities
    loss: float           # mean CE of attacker outputs against victim soft labels
    range: float          # max(mean) - min(mean)
    spread: float         # std of ``mean`` across classes

    @classmethod
    def zeros(cls, num_classes: int) -> "WindowStats":
        z = np.zeros(num_classes)
        return cls(mean=z, std=z, loss=0.0, range=0.0, spread=0.0)


def window_stats(victim_probs: np.ndarray, attacker_logits: np.ndarray, per_class_loss: bool = False) -> WindowStats:
    """Statistics over a nonempty window, normalized by the window size.

    With ``per_class_loss`` the CE is averaged within groups sharing a victim
    argmax and then across the groups present, instead of over all entries.
    """
    p = np.asarray(victim_probs, dtype=np.float64)
    if p.ndim != 2 or len(p) == 0:
        raise ValueError("window_stats needs a nonempty (n, C) window")
    mean = p.mean(axis=0)
    std = np.sqrt(((p - mean) ** 2).mean(axis=0))
    ce = cross_entropy_rows(np.asarray(attacker_logits, dtype=np.float64), p)
    if per_class_loss:
        groups = p.argmax(axis=1)
        loss = float(np.mean([ce[groups == c].mean() for c in np.unique(groups)]))
    else:
        loss = float(ce.mean())
    return WindowStats(mean=mean, std=std, loss=loss,
                       range=float(mean.max() - mean.min()), spread=float(mean.std()))


@dataclass(frozen=True)
class RewardWeights:
    ce: float = 1.0
    range: float = 1.0
    std: float = 1.0
    avg: float = 1.0

    @classmethod
    def from_sequence(cls, values) -> "RewardWeights":
        return cls(*map(float, values))

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.ce, self.range, self.std, self.avg)


def reward_terms(prev: WindowStats, cur: WindowStats, mode: str = "discrete") -> tuple[float, float, float, float]:
    """(r_ce, r_range, r_std, r_avg) for consecutive window statistics.

    Discrete mode scores each relative change +1 or -1 (ties score -1);
    continuous mode uses the signed differences directly.
    """
    r_std = float(cur.std.min())
    if mode == "discrete":
        r_ce = 1.0 if cur.loss > prev.loss else -1.0
        r_range = 1.0 if cur.range < prev.range else -1.0
        r_avg = 1.0 if cur.spread < prev.spread else -1.0
    elif mode == "continuous":
        r_ce = cur.loss - prev.loss
        r_range = prev.range - cur.range
        r_avg = prev.spread - cur.spread
    else:
        raise ValueError(f"unknown reward mode {mode!r}")
    return r_ce, r_range, r_std, r_avg


def combine(terms, weights: RewardWeights) -> float:
    return float(sum(w * t for w, t in zip(weights.as_tuple(), terms)))


def reward_discrete(prev: WindowStats, cur: WindowStats, weights: RewardWeights = RewardWeights()) -> float:
    return combine(reward_terms(prev, cur, "discrete"), weights)


def reward_continuous(prev: WindowStats, cur: WindowStats, weights: RewardWeights = RewardWeights()) -> float:
    return combine(reward_terms(prev, cur, "continuous"), weights)


def observation_size(num_classes: int) -> int:
    return 4 * num_classes + 2


def assemble_observation(attacker_probs: np.ndarray, victim_probs: np.ndarray, stats: WindowStats) -> np.ndarray:
    """[attacker probs | victim probs | window mean | window std | mean loss | range]."""
    parts = [np.ravel(attacker_probs), np.ravel(victim_probs), np.ravel(stats.mean), np.ravel(stats.std)]
    c = len(parts[0])
    if any(len(x) != c for x in parts):
        raise ValueError(f"observation components have lengths {[len(x) for x in parts]}, expected {c} each")
    return np.concatenate(parts + [[stats.loss, stats.range]]).astype(np.float32)


def split_observation(obs: np.ndarray, num_classes: int) -> dict[str, np.ndarray | float]:
    c = num_classes
    return {"attacker": obs[:c], "victim": obs[c:2 * c], "mean": obs[2 * c:3 * c],
            "std": obs[3 * c:4 * c], "loss": float(obs[4 * c]), "range": float(obs[4 * c + 1])}
