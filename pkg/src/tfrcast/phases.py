"""Detection of the Phase II start (tau) and Phase III start (lambda)."""
from __future__ import annotations

import numpy as np

from .types import BEFORE_START, NOT_REACHED, PhaseMarkers, ReferenceSeries

TAU_RANGE = 0.5
TAU_MIN_LEVEL = 5.5
LAMBDA_LEVEL = 2.0


def _values(series) -> np.ndarray:
    if isinstance(series, ReferenceSeries):
        return series.values
    return np.asarray(series, dtype=float)


def local_maxima(f: np.ndarray) -> np.ndarray:
    """Boolean mask of local maxima; plateaus count at every index and each
    endpoint only needs to be >= its single neighbour."""
    f = np.asarray(f, dtype=float)
    left = np.r_[True, f[1:] >= f[:-1]]
    right = np.r_[f[:-1] >= f[1:], True]
    return left & right


def find_tau(series) -> int:
    """Latest local maximum within 0.5 of the global maximum and above 5.5.

    Returns ``BEFORE_START`` when no local maximum qualifies.
    """
    f = _values(series)
    if f.size < 3:
        raise ValueError("need at least 3 periods")
    ok = local_maxima(f) & (f.max() - f < TAU_RANGE) & (f > TAU_MIN_LEVEL)
    idx = np.flatnonzero(ok)
    return int(idx[-1]) if idx.size else BEFORE_START


def five_year_averages(f: np.ndarray) -> np.ndarray:
    """Means over consecutive 5-year blocks aligned to the first year; a
    trailing partial block is averaged over the years it has."""
    f = np.asarray(f, dtype=float)
    starts = np.arange(0, f.size, 5)
    return np.add.reduceat(f, starts) / np.diff(np.r_[starts, f.size])


def _first_double_increase(f: np.ndarray, min_t: int) -> int:
    t = np.arange(1, f.size - 1)
    ok = (
        (f[1:-1] > f[:-2]) & (f[2:] > f[1:-1])
        & (f[:-2] < LAMBDA_LEVEL) & (f[1:-1] < LAMBDA_LEVEL) & (f[2:] < LAMBDA_LEVEL)
        & (t >= min_t)
    )
    idx = np.flatnonzero(ok)
    return int(t[idx[0]]) if idx.size else NOT_REACHED


def find_lambda(series, annual: bool = False, after: int | None = None) -> int:
    """First period of two consecutive increases with TFR below 2.

    In annual mode the rule runs on five-year block averages and the block
    found maps back to its first year. ``after`` restricts the search to
    periods strictly later than that index (used to keep tau < lambda).
    """
    f = _values(series)
    if f.size < 3:
        raise ValueError("need at least 3 periods")
    if not annual:
        return _first_double_increase(f, 1 if after is None else max(1, after + 1))
    avg = five_year_averages(f)
    if avg.size < 3:
        return NOT_REACHED
    # smallest block b with 5*b > after
    min_b = 1 if after is None else max(1, after // 5 + 1)
    b = _first_double_increase(avg, min_b)
    return NOT_REACHED if b == NOT_REACHED else 5 * b


def phase_markers(series, annual: bool = False) -> PhaseMarkers:
    tau = find_tau(series)
    lam = find_lambda(series, annual, after=None if tau == BEFORE_START else tau)
    return PhaseMarkers(tau, lam)
