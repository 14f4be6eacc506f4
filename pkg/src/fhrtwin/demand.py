"""Seeded hourly demand profiles (fractions of full power)."""
from __future__ import annotations

import numpy as np


def hourly_profile(n_hours: int, rng: np.random.Generator, low: float = 0.5, high: float = 1.0,
                   max_step: float = 0.2, hold_probability: float = 0.3, start: float = 1.0) -> np.ndarray:
    """Random walk of hourly targets in [low, high] with bounded hour-to-hour moves."""
    out = np.empty(n_hours)
    level = start
    for h in range(n_hours):
        if rng.random() >= hold_probability:
            level = float(np.clip(level + rng.uniform(-max_step, max_step), low, high))
        out[h] = level
    return out


def daily_load_follow(n_hours: int, rng: np.random.Generator, low: float = 0.5, high: float = 1.0,
                      noise: float = 0.03) -> np.ndarray:
    """Day/night demand shape with seeded jitter, quantised to hourly values."""
    hours = np.arange(n_hours)
    mid = 0.5 * (low + high)
    amp = 0.5 * (high - low) * 0.8
    shape = mid + amp * np.sin(2 * np.pi * (hours - 9) / 24.0)
    return np.clip(shape + rng.normal(0.0, noise, n_hours), low, high)


def expand(hourly: np.ndarray, steps_per_hour: int) -> np.ndarray:
    return np.repeat(np.asarray(hourly, dtype=float), steps_per_hour)


# monthly mean demand (fraction of full power), January first
SEASONAL_MEANS = (0.92, 0.9, 0.68, 0.66, 0.75, 0.88, 0.95, 0.95, 0.82, 0.72, 0.84, 0.92)


def seasonal_profile(n_hours: int, rng: np.random.Generator, start_month: int = 1, low: float = 0.5,
                     high: float = 1.0, swing: float = 0.1, noise: float = 0.02, month_hours=None) -> np.ndarray:
    """Monthly mean level plus a daily swing and seeded jitter, hourly."""
    if month_hours is None:
        month_hours = [24 * d for d in (31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31)]
    level = np.empty(n_hours)
    h, m = 0, start_month - 1
    while h < n_hours:
        n = month_hours[m % 12]
        level[h:h + n] = SEASONAL_MEANS[m % 12]
        h += n
        m += 1
    hours = np.arange(n_hours)
    shape = level + swing * np.sin(2 * np.pi * (hours - 9) / 24.0)
    return np.clip(shape + rng.normal(0.0, noise, n_hours), low, high)
