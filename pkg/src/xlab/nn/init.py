from __future__ import annotations

import math

import numpy as np

from .tensor import default_dtype


def fans(shape) -> tuple[int, int]:
    """(fan_in, fan_out) for a (in, out) matrix or an (out, in, kh, kw) kernel."""
    shape = tuple(shape)
    if len(shape) == 2:
        return shape[0], shape[1]
    if len(shape) == 4:
        receptive = shape[2] * shape[3]
        return shape[1] * receptive, shape[0] * receptive
    raise ValueError(f"cannot derive fan_in/fan_out from shape {shape}")


def xavier_bound(shape) -> float:
    fan_in, fan_out = fans(shape)
    return math.sqrt(6.0 / (fan_in + fan_out))


def xavier_uniform(shape, rng: np.random.Generator, dtype=None) -> np.ndarray:
    """Glorot-uniform sample on ``[-sqrt(6/(fan_in+fan_out)), +sqrt(...)]``."""
    bound = xavier_bound(shape)
    return rng.uniform(-bound, bound, size=tuple(shape)).astype(dtype or default_dtype())
