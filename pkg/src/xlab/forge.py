"""Query generation: base-image selection and targeted iterative FGSM."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .models import INPUT_SHAPE
from .nn import Parameter, Sequential, softmax_cross_entropy
from .nn.functional import ConfigError

EPS_MAX = 0.5
DEFAULT_ITERATIONS = 10


@dataclass(frozen=True)
class ForgeRequest:
    target: np.ndarray
    epsilon: float
    iterations: int = DEFAULT_ITERATIONS

    def __post_init__(self):
        t = np.asarray(self.target, dtype=np.float64)
        if t.ndim != 1 or (t < -1e-7).any() or abs(t.sum() - 1.0) > 1e-5:
            raise ValueError("target must be a probability vector")
        if self.iterations < 1:
            raise ConfigError(f"i-FGSM needs at least one iteration, got {self.iterations}")
        if not 0.0 <= self.epsilon <= EPS_MAX:
            raise ValueError(f"epsilon {self.epsilon} outside [0, {EPS_MAX}]")


class DataPool:
    """Immutable set of unlabeled images with pixels in [0, 1]; may be empty."""

    def __init__(self, images=None, image_shape: tuple[int, ...] = INPUT_SHAPE):
        self.image_shape = tuple(image_shape)
        if images is None or len(images) == 0:
            arr = np.zeros((0, *self.image_shape), dtype=np.float32)
        else:
            arr = np.array(images, dtype=np.float32).reshape((-1, *self.image_shape))
            if arr.min() < 0.0 or arr.max() > 1.0:
                raise ValueError("pool images must have pixels in [0, 1]")
        arr.setflags(write=False)
        self.images = arr

    def __len__(self) -> int:
        return len(self.images)


def draw_base(pool: DataPool, rng: np.random.Generator) -> np.ndarray:
    """A uniformly chosen pool image, or uniform-noise pixels when the pool is empty."""
    if len(pool):
        return pool.images[rng.integers(len(pool))].copy()
    return rng.random(pool.image_shape, dtype=np.float32)


def ifgsm(attacker: Sequential, image: np.ndarray, request: ForgeRequest) -> np.ndarray:
    """Targeted i-FGSM: descend CE(attacker(x), target) in ``iterations`` sign steps of epsilon/iterations."""
    x0 = np.asarray(image, dtype=np.float32)
    target = np.asarray(request.target, dtype=np.float32)[None]
    step = np.float32(request.epsilon / request.iterations)
    if step == 0:
        return x0.copy()
    lo = np.maximum(x0 - np.float32(request.epsilon), 0)
    hi = np.minimum(x0 + np.float32(request.epsilon), 1)
    x = x0.copy()
    with attacker.frozen():
        for _ in range(request.iterations):
            xt = Parameter(x[None])
            softmax_cross_entropy(attacker(xt), target).backward()
            x = np.clip(x - step * np.sign(xt.grad[0]), 0.0, 1.0)
        # per-step clipping already keeps the eps-ball; this absorbs float rounding
        x = np.clip(x, lo, hi)
    return x.astype(np.float32)


def uniform_perturb(image: np.ndarray, epsilon: float, rng: np.random.Generator) -> np.ndarray:
    """Random-noise generator: add U(-epsilon, epsilon) per pixel, clipped to [0, 1]."""
    x = np.asarray(image, dtype=np.float32)
    noise = rng.uniform(-epsilon, epsilon, size=x.shape).astype(np.float32)
    return np.clip(x + noise, 0.0, 1.0)
