"""Quantities derived from fitted curves: growth rates, bands, differences."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .kalman import ComponentSeries
from .ssm import ModelError


@dataclass(frozen=True)
class RateSummary:
    """Per-step differences of a curve on a uniform grid.

    ``rates[j]`` is ``mu[j+1] - mu[j]`` and is attributed to ``times[j]``,
    the later of the two grid points. ``step`` converts to per-unit-time.
    """

    times: np.ndarray
    rates: np.ndarray
    max_rate: float
    time_of_max: float
    step: float

    @property
    def max_rate_per_time(self) -> float:
        return self.max_rate / self.step


@dataclass(frozen=True)
class Band:
    times: np.ndarray
    estimate: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    level: float = 0.95

    @property
    def half_width(self) -> np.ndarray:
        return self.upper - self.estimate


@dataclass(frozen=True)
class Difference:
    """``a - b`` with a pointwise band; ``assumption`` records how variances combine."""

    series: ComponentSeries
    band: Band
    assumption: str = "independent fits: variances add"


def growth_rate(mean: ComponentSeries, rtol: float = 1e-9) -> RateSummary:
    t = np.asarray(mean.times, dtype=float)
    if t.size < 2:
        raise ModelError("growth rate needs at least two grid points")
    h = np.diff(t)
    step = float(h[0])
    if np.any(np.abs(h - step) > rtol * abs(step)):
        raise ModelError("growth rate needs a uniform grid; augment the data on a regular step first")
    rates = np.diff(mean.estimate)
    # differences equal up to rounding of the curve values count as ties
    tol = 64 * np.finfo(float).eps * max(1.0, float(np.abs(mean.estimate).max()))
    j = int(np.flatnonzero(rates >= rates.max() - tol)[0])
    return RateSummary(t[1:], rates, float(rates.max()), float(t[j + 1]), step)


def z_value(level: float) -> float:
    if not 0.0 < level < 1.0:
        raise ModelError(f"confidence level must lie in (0, 1), got {level}")
    return float(stats.norm.ppf(0.5 + level / 2.0))


def confidence_band(c: ComponentSeries, level: float = 0.95) -> Band:
    z = z_value(level)
    var = np.asarray(c.variance, dtype=float)
    if np.any(var < 0):
        raise ModelError(f"negative variance in {c.name!r}")
    hw = z * np.sqrt(var)
    return Band(c.times.copy(), c.estimate.copy(), c.estimate - hw, c.estimate + hw, level)


def curve_difference(a: ComponentSeries, b: ComponentSeries, level: float = 0.95) -> Difference:
    """Pointwise ``a - b`` for curves from independently fitted groups."""
    if a.times.shape != b.times.shape or not np.allclose(a.times, b.times, rtol=0, atol=1e-9):
        raise ModelError("curves live on different grids; augment both onto a common grid first")
    diff = ComponentSeries(a.times.copy(), a.estimate - b.estimate, a.variance + b.variance,
                           f"{a.name}-{b.name}")
    return Difference(diff, confidence_band(diff, level))


def deviation_curves(fit) -> list:
    """Replicate deviation series of a mixed-effects fit, in replicate order."""
    if not fit.spec.is_fme:
        raise ModelError("deviation curves exist only for fits with random-walk deviations")
    return list(fit.deviations)
