"""Correlation metrics between predicted scores and MOS.

All functions take two equal-length sequences of finite reals (n >= 2) and
raise :class:`UndefinedCorrelationError` instead of returning NaN when a
coefficient is undefined.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, UndefinedCorrelationError


def _pair(pred, mos) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(pred, dtype=np.float64).ravel()
    y = np.asarray(mos, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise DimensionError(f"length mismatch: {x.size} predictions vs {y.size} MOS values")
    if x.size < 2:
        raise DimensionError("correlation needs at least 2 pairs")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise DimensionError("non-finite score")
    return x, y


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = np.dot(xc, xc)
    syy = np.dot(yc, yc)
    if sxx == 0 or syy == 0:
        raise UndefinedCorrelationError("correlation undefined for a constant vector")
    r = np.dot(xc, yc) / np.sqrt(sxx * syy)
    return float(np.clip(r, -1.0, 1.0))


def plcc(pred, mos) -> float:
    """Pearson linear correlation (no nonlinear remapping)."""
    return _pearson(*_pair(pred, mos))


def average_ranks(x) -> np.ndarray:
    """1-based ranks; tied values share the mean of their positions."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    sx = x[order]
    ranks = np.empty(x.size, dtype=np.float64)
    start = 0
    n = x.size
    while start < n:
        stop = start + 1
        while stop < n and sx[stop] == sx[start]:
            stop += 1
        ranks[order[start:stop]] = (start + stop + 1) / 2.0
        start = stop
    return ranks


def srcc(pred, mos) -> float:
    """Spearman rank correlation: Pearson correlation of average ranks."""
    x, y = _pair(pred, mos)
    return _pearson(average_ranks(x), average_ranks(y))


def krcc(pred, mos, variant: str = "b") -> float:
    """Kendall rank correlation over all n(n-1)/2 pairs; tau-b by default, tau-a optional."""
    x, y = _pair(pred, mos)
    n = x.size
    i, j = np.triu_indices(n, k=1)
    dx = np.sign(x[i] - x[j])
    dy = np.sign(y[i] - y[j])
    s = float(np.sum(dx * dy))
    n0 = n * (n - 1) / 2
    if variant == "a":
        return s / n0
    if variant != "b":
        raise ValueError(f"unknown Kendall variant {variant!r}")
    untied_x = float(np.count_nonzero(dx))
    untied_y = float(np.count_nonzero(dy))
    if untied_x == 0 or untied_y == 0:
        raise UndefinedCorrelationError("Kendall tau-b undefined: a vector is all tied")
    return max(-1.0, min(1.0, s / np.sqrt(untied_x * untied_y)))


def main_score(plcc_value: float, srcc_value: float) -> float:
    """Challenge main score: PLCC + SRCC."""
    return float(plcc_value) + float(srcc_value)


def correlations(pred, mos) -> dict[str, float]:
    p, s = plcc(pred, mos), srcc(pred, mos)
    return {"plcc": p, "srcc": s, "krcc": krcc(pred, mos), "main_score": main_score(p, s)}
