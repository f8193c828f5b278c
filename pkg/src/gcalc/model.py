"""Core domain constants: the volatility band, time partitions, the G-function
and the zeta-type series constants used by the norm estimates."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np


class GCalcError(ValueError):
    """Base class for all errors raised by gcalc."""


class DivergentSeriesError(GCalcError):
    pass


class ExponentError(GCalcError):
    pass


@dataclass(frozen=True)
class VolatilityBand:
    """Volatility interval [sigma_min, sigma_max].

    The variance set is the interval [sigma_min**2, sigma_max**2]; the band is
    non-degenerate whenever sigma_min > 0, which is enforced here.
    """

    sigma_min: float
    sigma_max: float

    def __post_init__(self):
        if not (math.isfinite(self.sigma_min) and math.isfinite(self.sigma_max)):
            raise GCalcError("volatility band must be finite")
        if not 0 < self.sigma_min <= self.sigma_max:
            raise GCalcError(
                f"need 0 < sigma_min <= sigma_max, got [{self.sigma_min}, {self.sigma_max}]"
            )

    @property
    def var_min(self) -> float:
        return self.sigma_min**2

    @property
    def var_max(self) -> float:
        return self.sigma_max**2

    @property
    def degenerate(self) -> bool:
        return self.sigma_min == self.sigma_max

    def contains(self, sigma, atol: float = 1e-12) -> bool:
        sigma = np.asarray(sigma)
        return bool(np.all((sigma >= self.sigma_min - atol) & (sigma <= self.sigma_max + atol)))


def g_of(a, band: VolatilityBand):
    """G(a) = (sigma_max**2 * a^+ - sigma_min**2 * a^-) / 2, elementwise."""
    a = np.asarray(a, dtype=float)
    out = 0.5 * (band.var_max * np.maximum(a, 0.0) - band.var_min * np.maximum(-a, 0.0))
    return float(out) if out.ndim == 0 else out


def nondegeneracy(band: VolatilityBand) -> float:
    """Largest beta with G(a) - G(b) >= beta * (a - b) for all a >= b."""
    return band.var_min / 2.0


@dataclass(frozen=True)
class TimePartition:
    """Ordered time points 0 = t_0 < t_1 < ... < t_n = T."""

    times: tuple[float, ...]

    def __post_init__(self):
        times = tuple(float(t) for t in self.times)
        object.__setattr__(self, "times", times)
        if len(times) < 2:
            raise GCalcError("a partition needs at least two points (n >= 1)")
        if times[0] != 0.0:
            raise GCalcError("a partition must start at t = 0")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise GCalcError(f"partition times must be strictly increasing: {times}")

    @property
    def horizon(self) -> float:
        return self.times[-1]

    @property
    def n(self) -> int:
        """Number of increments."""
        return len(self.times) - 1

    @property
    def durations(self) -> tuple[float, ...]:
        return tuple(b - a for a, b in zip(self.times, self.times[1:]))

    def index_of(self, t: float, tol: float = 1e-9) -> int | None:
        for i, s in enumerate(self.times):
            if abs(s - t) <= tol:
                return i
        return None


@dataclass(frozen=True)
class SeriesConstant:
    """Bracketed value of C_r = sum_{i>=1} i^(-r).

    ``partial_sum <= value <= partial_sum + tail_bound`` where the tail bound
    comes from the integral test.
    """

    exponent: float
    value: float
    tail_bound: float
    partial_sum: float
    n_terms: int

    @property
    def lower(self) -> float:
        return self.partial_sum

    @property
    def upper(self) -> float:
        return self.partial_sum + self.tail_bound

    @property
    def rel_width(self) -> float:
        return self.tail_bound / self.partial_sum


_CHUNK = 1 << 21
_MAX_TERMS = 2 * 10**9


def _partial_sum(r: float, n_terms: int) -> float:
    # summed from the small terms upward to limit rounding
    total = 0.0
    hi = n_terms
    while hi > 0:
        lo = max(0, hi - _CHUNK)
        i = np.arange(hi, lo, -1, dtype=float)
        total += float(np.sum(i ** (-r)))
        hi = lo
    return total


def series_bracket(r: float, n_terms: int) -> SeriesConstant:
    """Partial sum to ``n_terms`` with the integral-test tail bound."""
    if not r > 1:
        raise DivergentSeriesError(f"sum of i^(-r) diverges for r = {r} <= 1")
    if n_terms < 1:
        raise GCalcError("n_terms must be positive")
    s = _partial_sum(r, n_terms)
    tail = n_terms ** (1.0 - r) / (r - 1.0)
    # midpoint tail estimate; lies inside the rigorous bracket
    est = s + (n_terms + 0.5) ** (1.0 - r) / (r - 1.0)
    return SeriesConstant(exponent=r, value=est, tail_bound=tail, partial_sum=s, n_terms=n_terms)


@lru_cache(maxsize=64)
def series_constant(r: float, rel_tol: float = 1e-2) -> SeriesConstant:
    """C_r with relative bracket width at most ``rel_tol``."""
    if not r > 1:
        raise DivergentSeriesError(f"sum of i^(-r) diverges for r = {r} <= 1")
    if not rel_tol > 0:
        raise GCalcError("rel_tol must be positive")
    # S_N >= S_pilot, so this N satisfies tail <= rel_tol * S_N
    pilot = series_bracket(r, 1000)
    need = ((r - 1.0) * rel_tol * pilot.partial_sum) ** (-1.0 / (r - 1.0))
    n_terms = max(1000, int(math.ceil(need)))
    if n_terms > _MAX_TERMS:
        raise GCalcError(
            f"rel_tol={rel_tol} needs {n_terms:.3g} terms for r={r}; loosen the tolerance"
        )
    out = series_bracket(r, n_terms)
    assert out.rel_width <= rel_tol * (1 + 1e-12)
    return out


def conjugate_exponent(gamma: float) -> float:
    """gamma* = gamma / (gamma - 1)."""
    if not gamma > 1:
        raise ExponentError(f"conjugate exponent needs gamma > 1, got {gamma}")
    return gamma / (gamma - 1.0)
