"""Growth-exponent fits and the analytic information-gain bound."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .errors import ArgumentError, DataError, NumericalError

METRICS = ("cum_regret", "info_gain_cum")
MIN_FIT_POINTS = 20


@dataclass(frozen=True)
class FitReport:
    exponent: float
    stderr: float
    window: tuple[int, int]
    n_points: int


def fit_series(t, values, window: tuple[int, int] | None = None) -> FitReport:
    """Least-squares slope of log(values) against log(t) over ``window``
    (inclusive, default [T/2, T] with T = max t)."""
    t = np.asarray(t, dtype=float)
    v = np.asarray(values, dtype=float)
    if t.shape != v.shape or t.ndim != 1 or t.size == 0:
        raise ArgumentError("t and values must be equal-length nonempty vectors")
    T = int(t.max())
    lo, hi = window if window is not None else (max(1, T // 2), T)
    if not 1 <= lo <= hi <= T:
        raise ArgumentError(f"window [{lo}, {hi}] not inside [1, {T}]")
    mask = (t >= lo) & (t <= hi)
    if mask.sum() < MIN_FIT_POINTS:
        raise DataError(f"window [{lo}, {hi}] holds {int(mask.sum())} points; "
                        f"need at least {MIN_FIT_POINTS}")
    if np.any(v[mask] <= 0):
        bad = t[mask][v[mask] <= 0][0]
        raise NumericalError(f"cannot fit a power law: nonpositive value at t={int(bad)}")
    res = stats.linregress(np.log(t[mask]), np.log(v[mask]))
    return FitReport(float(res.slope), float(res.stderr), (lo, hi), int(mask.sum()))


def fit_growth(log, metric: str = "cum_regret", window: tuple[int, int] | None = None) -> FitReport:
    if metric not in METRICS:
        raise ArgumentError(f"metric must be one of {METRICS}, got {metric!r}")
    t = [row.t for row in log]
    v = [getattr(row, metric) for row in log]
    return fit_series(t, v, window)


def gamma_bound(T: float, d: int, noise_var: float, C: float, cntk: bool = False) -> float:
    """Order-level bound on the maximum information gain of the NTK.

    With R = C T / log(1 + T / sigma^2) (divided by d for the CNTK) and
    D = ceil(R^((d-1)/d)), returns D * log(1 + T D / sigma^2).
    """
    if C <= 0:
        raise ArgumentError(f"C must be positive, got {C}")
    if T < 1 or d < 1 or noise_var <= 0:
        raise ArgumentError("need T >= 1, d >= 1 and sigma^2 > 0")
    ratio = C * T / math.log1p(T / noise_var)
    if cntk:
        ratio /= d
    D = math.ceil(ratio ** ((d - 1) / d))
    return D * math.log1p(T * D / noise_var)
