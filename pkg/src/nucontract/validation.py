"""Small argument checks used across the package."""

from __future__ import annotations

import numbers

import numpy as np
from sklearn.utils import check_random_state

__all__ = [
    "check_real",
    "check_positive",
    "check_nonnegative",
    "check_time",
    "check_times",
    "check_random_state",
]


def check_real(value, name: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (numbers.Real, np.floating, np.integer)):
        raise TypeError(f"{name} must be a real number, got {type(value).__name__}")
    value = float(value)
    if not np.isfinite(value):
        raise ValueError(f"{name} must be finite, got {value}")
    return value


def check_positive(value, name: str) -> float:
    value = check_real(value, name)
    if value <= 0:
        raise ValueError(f"{name} must be positive, got {value}")
    return value


def check_nonnegative(value, name: str) -> float:
    value = check_real(value, name)
    if value < 0:
        raise ValueError(f"{name} must be nonnegative, got {value}")
    return value


def check_time(t, horizon: float, name: str = "t", slack: float = 1e-9) -> float:
    """Validate a single time against ``[0, horizon]``."""
    from .errors import HorizonError

    t = check_real(t, name)
    if t < -slack or t > horizon * (1 + slack) + slack:
        raise HorizonError(f"{name}={t} outside [0, {horizon}]")
    return min(max(t, 0.0), horizon)


def check_times(t, horizon: float, name: str = "t", slack: float = 1e-9) -> np.ndarray:
    """Array version of :func:`check_time`; returns a float array."""
    from .errors import HorizonError

    arr = np.asarray(t, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise HorizonError(f"{name} contains non-finite values")
    if arr.size and (arr.min() < -slack or arr.max() > horizon * (1 + slack) + slack):
        bad = arr[(arr < -slack) | (arr > horizon * (1 + slack) + slack)][0]
        raise HorizonError(f"{name}={bad} outside [0, {horizon}]")
    return np.clip(arr, 0.0, horizon)
