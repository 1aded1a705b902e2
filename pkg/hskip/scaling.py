"""Least-squares scaling fits over campaign results."""

from __future__ import annotations

from collections import defaultdict
from collections.abc import Iterable, Sequence
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Fit:
    intercept: float
    slope: float
    r2: float


def _linear(x: np.ndarray, y: np.ndarray) -> Fit:
    if len(x) < 2 or np.ptp(x) == 0:
        raise ValueError("a fit needs at least two distinct x values")
    design = np.column_stack([np.ones_like(x), x])
    (a, b), *_ = np.linalg.lstsq(design, y, rcond=None)
    residual = y - (a + b * x)
    total = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 if total == 0 else 1.0 - float(np.sum(residual**2)) / total
    return Fit(float(a), float(b), r2)


def fit_log_linear(ns: Sequence[float], ys: Sequence[float]) -> Fit:
    """y ~ a + b * log2(n)."""
    return _linear(np.log2(np.asarray(ns, dtype=float)), np.asarray(ys, dtype=float))


def fit_loglog_slope(ns: Sequence[float], ys: Sequence[float]) -> Fit:
    """Slope of log(y) against log(log2 n); 2 means y ~ log2(n) squared."""
    ns = np.asarray(ns, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if np.any(ns <= 2) or np.any(ys <= 0):
        raise ValueError("log-log fit needs n > 2 and positive y")
    return _linear(np.log(np.log2(ns)), np.log(ys))


def medians_by_n(pairs: Iterable[tuple[int, float]]) -> tuple[list[int], list[float]]:
    groups: dict[int, list[float]] = defaultdict(list)
    for n, y in pairs:
        groups[n].append(y)
    ns = sorted(groups)
    return ns, [float(np.median(groups[n])) for n in ns]
