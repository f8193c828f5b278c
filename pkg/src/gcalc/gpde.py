"""Monotone explicit finite differences for the 1D G-heat equation

    u_t + G(u_xx) = 0,   u(duration, .) = phi,

marched backward from the terminal data. u(0, 0) is the G-normal expectation
of phi(sqrt(duration) * X).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .model import GCalcError, VolatilityBand

BOUNDARIES = ("linear", "clamped")


class CFLError(GCalcError):
    pass


class DomainError(GCalcError):
    pass


@dataclass(frozen=True)
class GridFunction:
    """Values on the uniform grid of ``nx`` points over [-half_width, half_width]."""

    half_width: float
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", values)
        if values.ndim != 1 or values.size < 3 or values.size % 2 == 0:
            raise GCalcError(f"grid needs an odd number >= 3 of points, got {values.shape}")
        if not self.half_width > 0:
            raise GCalcError("half_width must be positive")
        if not np.all(np.isfinite(values)):
            raise GCalcError("grid values must be finite")

    @classmethod
    def sample(cls, f: Callable, half_width: float, nx: int) -> "GridFunction":
        x = np.linspace(-half_width, half_width, nx)
        return cls(half_width, np.broadcast_to(np.asarray(f(x), dtype=float), x.shape))

    @property
    def nx(self) -> int:
        return self.values.size

    @property
    def dx(self) -> float:
        return 2 * self.half_width / (self.nx - 1)

    @property
    def x(self) -> np.ndarray:
        return np.linspace(-self.half_width, self.half_width, self.nx)


@dataclass(frozen=True)
class SolverConfig:
    half_width: float | None = None
    nx: int = 401
    cfl_factor: float = 0.45
    boundary: str = "linear"
    richardson: bool = False
    max_slices: int | None = None

    def __post_init__(self):
        if self.nx < 3 or self.nx % 2 == 0:
            raise GCalcError(f"nx must be odd and >= 3, got {self.nx}")
        if not 0 < self.cfl_factor <= 1:
            raise CFLError(f"cfl_factor must lie in (0, 1], got {self.cfl_factor}")
        if self.boundary not in BOUNDARIES:
            raise GCalcError(f"boundary must be one of {BOUNDARIES}")
        if self.half_width is not None and not self.half_width > 0:
            raise GCalcError("half_width must be positive")
        if self.richardson and (self.nx - 1) % 4:
            raise GCalcError("richardson needs nx = 1 (mod 4) so the coarse grid contains 0")

    def resolve_half_width(self, band: VolatilityBand, duration: float, growth_degree: int) -> float:
        if self.half_width is not None:
            return self.half_width
        return default_half_width(band, duration, growth_degree)


def default_half_width(band: VolatilityBand, duration: float, growth_degree: int) -> float:
    return 8.0 * band.sigma_max * math.sqrt(duration) * (1.0 + growth_degree / 2.0)


def n_time_steps(duration: float, dx: float, band: VolatilityBand, cfl_factor: float, multiple: int = 1) -> int:
    """Smallest step count (a multiple of ``multiple``) with dt <= cfl * dx^2 / sigma_max^2."""
    n = math.ceil(duration * band.var_max / (cfl_factor * dx * dx) * (1 - 1e-12))
    n = max(n, 1)
    return multiple * math.ceil(n / multiple)


def march(
    values: np.ndarray,
    dx: float,
    duration: float,
    band: VolatilityBand,
    n_steps: int,
    boundary: str = "linear",
    store: np.ndarray | None = None,
    window: slice = slice(None),
):
    """March terminal ``values`` (batch, nx) backward over ``duration``.

    ``store`` lists step counts m (time tau = duration - m*dt) whose slices
    are kept, restricted to the grid ``window``. Returns (u at tau = 0,
    stored slices ordered by increasing tau, their tau values).
    """
    u = np.array(values, dtype=float, copy=True)
    if u.ndim == 1:
        u = u[None, :]
    dt = duration / n_steps
    ratio = dt / (dx * dx)
    if ratio * band.var_max > 1 + 1e-12:
        raise CFLError(f"dt*sigma_max^2/dx^2 = {ratio * band.var_max:.4f} > 1: scheme not monotone")
    c_hi = 0.5 * band.var_max * ratio
    c_lo = 0.5 * band.var_min * ratio
    keep = set() if store is None else {int(m) for m in store}
    slices = {}
    if 0 in keep:
        slices[0] = u[:, window].copy()
    d2 = np.empty((u.shape[0], u.shape[1] - 2))
    tmp = np.empty_like(d2)
    for m in range(1, n_steps + 1):
        np.subtract(u[:, 2:], u[:, 1:-1], out=d2)
        d2 -= u[:, 1:-1]
        d2 += u[:, :-2]
        np.maximum(d2, 0.0, out=tmp)
        tmp *= c_hi - c_lo
        d2 *= c_lo
        d2 += tmp
        u[:, 1:-1] += d2
        if boundary == "linear":
            u[:, 0] = 2 * u[:, 1] - u[:, 2]
            u[:, -1] = 2 * u[:, -2] - u[:, -3]
        if m in keep:
            slices[m] = u[:, window].copy()
    if not np.all(np.isfinite(u)):
        raise DomainError("non-finite values in the solution; enlarge the domain or shrink the payoff")
    ms = sorted(slices, reverse=True)
    stored = np.stack([slices[m] for m in ms], axis=1) if ms else None
    return u, stored, np.array([duration - m * dt for m in ms])


def x_derivatives(u: np.ndarray, dx: float):
    """Centered first and second differences along the last axis.

    Edges use one-sided first differences and zero curvature, matching the
    linear-extrapolation boundary.
    """
    ux = np.empty_like(u)
    uxx = np.zeros_like(u)
    ux[..., 1:-1] = (u[..., 2:] - u[..., :-2]) / (2 * dx)
    ux[..., 0] = (-3 * u[..., 0] + 4 * u[..., 1] - u[..., 2]) / (2 * dx)
    ux[..., -1] = (3 * u[..., -1] - 4 * u[..., -2] + u[..., -3]) / (2 * dx)
    uxx[..., 1:-1] = (u[..., 2:] - 2 * u[..., 1:-1] + u[..., :-2]) / (dx * dx)
    return ux, uxx


def store_schedule(n_steps: int, max_slices: int | None) -> np.ndarray:
    if max_slices is None or max_slices >= n_steps + 1:
        return np.arange(n_steps + 1)
    return np.unique(np.round(np.linspace(0, n_steps, max(max_slices, 2))).astype(int))


@dataclass(frozen=True)
class ValueSlab:
    """u, u_x, u_xx over [0, duration] x grid; ``times[-1] == duration`` is terminal."""

    times: np.ndarray
    x: np.ndarray
    u: np.ndarray
    u_x: np.ndarray
    u_xx: np.ndarray
    duration: float
    value: float
    grid_error: float = float("nan")

    @property
    def half_width(self) -> float:
        return float(self.x[-1])

    @property
    def dx(self) -> float:
        return float(self.x[1] - self.x[0])

    def to_csv(self, path) -> None:
        """Dump u with one row per stored time slice (first column is time)."""
        header = "t," + ",".join(f"{v:.10g}" for v in self.x)
        np.savetxt(path, np.column_stack([self.times, self.u]), delimiter=",", header=header, comments="")


def solve_gheat(
    terminal: GridFunction,
    duration: float,
    band: VolatilityBand,
    cfg: SolverConfig = SolverConfig(),
) -> ValueSlab:
    """Solve backward from ``terminal`` over ``duration``; the terminal grid fixes the domain."""
    if not duration > 0:
        raise GCalcError("duration must be positive")
    dx = terminal.dx
    mult = 4 if cfg.richardson else 1
    n = n_time_steps(duration, dx, band, cfg.cfl_factor, multiple=mult)
    sched = store_schedule(n, cfg.max_slices)
    u0, stored, times = march(terminal.values, dx, duration, band, n, cfg.boundary, store=sched)
    stored = stored[0]
    ux, uxx = x_derivatives(stored, dx)
    c = terminal.nx // 2
    value = float(u0[0, c])
    err = float("nan")
    if cfg.richardson:
        coarse, _, _ = march(terminal.values[::2], 2 * dx, duration, band, n // 4, cfg.boundary)
        vc = float(coarse[0, c // 2])
        err = abs(value - vc) / 3.0
        value = (4.0 * value - vc) / 3.0
    return ValueSlab(times, terminal.x, stored, ux, uxx, duration, value, err)


def gnormal_expect(
    payoff_1d: Callable,
    t: float,
    band: VolatilityBand,
    cfg: SolverConfig = SolverConfig(),
    growth_degree: int = 2,
) -> float:
    """G-normal expectation of ``payoff_1d(sqrt(t) X)``, i.e. E^[phi(B_t)]."""
    if not t > 0:
        raise GCalcError("t must be positive")
    L = cfg.resolve_half_width(band, t, growth_degree)
    terminal = GridFunction.sample(payoff_1d, L, cfg.nx)
    return solve_gheat(terminal, t, band, replace(cfg, max_slices=2)).value


def _bracket(grid: np.ndarray, q: float):
    i = int(np.clip(np.searchsorted(grid, q, side="right") - 1, 0, grid.size - 2))
    w = (q - grid[i]) / (grid[i + 1] - grid[i])
    return i, w


def derivatives_at(slab: ValueSlab, t: float, x: float):
    """Bilinear interpolation of (u, u_x, u_xx) at slab time ``t`` and space ``x``."""
    if not -1e-12 <= t <= slab.duration + 1e-12:
        raise DomainError(f"t = {t} outside [0, {slab.duration}]")
    if abs(x) > slab.half_width - slab.dx + 1e-12:
        raise DomainError(f"|x| = {abs(x)} beyond L - dx = {slab.half_width - slab.dx}")
    i, wt = _bracket(slab.times, t)
    j, wx = _bracket(slab.x, x)

    def interp(a):
        lo = (1 - wx) * a[i, j] + wx * a[i, j + 1]
        hi = (1 - wx) * a[i + 1, j] + wx * a[i + 1, j + 1]
        return float((1 - wt) * lo + wt * hi)

    return interp(slab.u), interp(slab.u_x), interp(slab.u_xx)
