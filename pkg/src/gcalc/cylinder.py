"""Backward nested evaluation of cylindrical payoffs.

For xi = phi(D_1, ..., D_n) the recursion runs i = n-1, ..., 0: at every node
(x_1..x_i) of the stage-i tensor grid, the G-heat equation is solved in the
next increment over t_{i+1} - t_i with terminal data psi_{i+1}(x_1..x_i, .).
psi_0 is E^[xi]; psi_i is E^_{t_i}[xi] as a function of the observed
increments. The per-node solutions are kept as slabs so the conditional
process can be read between partition points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .gpde import (
    DomainError,
    SolverConfig,
    default_half_width,
    march,
    n_time_steps,
)
from .interp import slab_query, stencil
from .model import GCalcError, TimePartition, VolatilityBand
from .payoff import PayoffExpr


class StageLimitError(GCalcError):
    pass


@dataclass(frozen=True)
class CylinderConfig:
    solver: SolverConfig = SolverConfig()
    stage_points: int = 61
    stage_width: float = 6.0  # stage half-width in units of sigma_max * sqrt(t_i)
    n_max: int = 3
    max_slices: int = 65
    slab_budget_mb: float = 256.0
    window_sd: float = 7.0
    stage_refine: int = 4  # intermediate PDE points per stage-axis spacing
    keep_slabs: bool = True

    def __post_init__(self):
        if self.stage_points < 5 or self.stage_points % 2 == 0:
            raise GCalcError("stage_points must be odd and >= 5")
        if self.n_max < 1:
            raise GCalcError("n_max must be >= 1")
        if self.stage_refine < 1:
            raise GCalcError("stage_refine must be >= 1")
        if self.max_slices < 2:
            raise GCalcError("max_slices must be >= 2")


@dataclass(frozen=True)
class StageAxis:
    half_width: float
    points: int

    @property
    def spacing(self) -> float:
        return 2 * self.half_width / (self.points - 1)

    @property
    def grid(self) -> np.ndarray:
        return np.linspace(-self.half_width, self.half_width, self.points)


@dataclass(frozen=True)
class StageSlabs:
    """Stored values v(tau, y) for every node of one stage.

    ``u`` has shape (nodes, slices, window); tau runs from 0 (the partition
    point t_i) to ``duration``.
    """

    duration: float
    tau: np.ndarray
    y0: float
    dy: float
    u: np.ndarray

    @property
    def y(self) -> np.ndarray:
        return self.y0 + self.dy * np.arange(self.u.shape[2])

    def query(self, cidx, cw, tau, y, derivatives: bool = True):
        """Interpolated (u, u_x, u_xx, valid) at stage time ``tau`` and displacement ``y``.

        ``cidx``/``cw`` (P, C) are node corners from :meth:`ConditionalSurface.corners`;
        ``tau`` is a scalar or (Kc,) and ``y`` is (P,) or (P, Kc).
        """
        y = np.asarray(y, dtype=float)
        squeeze = y.ndim == 1
        y2 = np.ascontiguousarray(y.reshape(y.shape[0], -1))
        P, Kc = y2.shape
        tq = np.ascontiguousarray(np.broadcast_to(np.asarray(tau, dtype=float), (Kc,)))
        out_u = np.empty((P, Kc))
        out_ux = np.empty((P, Kc)) if derivatives else out_u
        out_uxx = np.empty((P, Kc)) if derivatives else out_u
        valid = np.ones(P, dtype=np.bool_)
        cidx = np.ascontiguousarray(np.broadcast_to(cidx, (P, np.shape(cidx)[-1])), dtype=np.int64)
        cw = np.ascontiguousarray(np.broadcast_to(cw, (P, np.shape(cw)[-1])), dtype=float)
        slab_query(self.u, self.tau, self.y0, self.dy, cidx, cw, tq, y2, derivatives, out_u, out_ux, out_uxx, valid)
        if squeeze:
            out_u = out_u[:, 0]
            out_ux = out_ux[:, 0]
            out_uxx = out_uxx[:, 0]
        if not derivatives:
            return out_u, None, None, valid
        return out_u, out_ux, out_uxx, valid


@dataclass
class ConditionalSurface:
    """Output of :func:`backward_eval`.

    ``psi[i]`` holds E^_{t_i}[xi] on the stage-i tensor grid (``psi[0]`` is
    0-dimensional); ``stages[i]`` the slabs over [t_i, t_{i+1}].
    """

    payoff: PayoffExpr
    band: VolatilityBand
    cfg: CylinderConfig
    axes: tuple[StageAxis, ...]
    psi: list
    stages: list
    abs_power: float | None = None
    grid_error: float = float("nan")
    label: str = field(default="")

    @property
    def partition(self) -> TimePartition:
        return self.payoff.partition

    @property
    def n(self) -> int:
        return self.payoff.n

    @property
    def value(self) -> float:
        return float(self.psi[0])

    def terminal(self, increments) -> np.ndarray:
        """The (possibly transformed) payoff evaluated on increments."""
        return _terminal(self.payoff, self.abs_power, increments)

    def corners(self, observed, n_paths: int | None = None):
        """Cubic-stencil node corners on the stage grid for observed increments.

        ``observed`` is a list of i arrays (x_1..x_i). Returns flat node
        indices and weights of shape (P, 4**i) and an inside-grid mask (P,).
        """
        i = len(observed)
        if i == 0:
            P = 1 if n_paths is None else n_paths
            return np.zeros((P, 1), dtype=np.int64), np.ones((P, 1)), np.ones(P, dtype=bool)
        xs = np.broadcast_arrays(*[np.atleast_1d(np.asarray(x, dtype=float)) for x in observed])
        P = xs[0].shape[0]
        m = self.cfg.stage_points
        idx = np.zeros((P, 1), dtype=np.int64)
        w = np.ones((P, 1))
        ok = np.ones(P, dtype=bool)
        offsets = np.arange(-1, 3)
        for axis, x in zip(self.axes[:i], xs):
            base, wk, inside = stencil((x + axis.half_width) / axis.spacing, m)
            ok &= inside
            k = base[:, None] + offsets[None, :]
            idx = (idx[:, :, None] * m + k[:, None, :]).reshape(P, -1)
            w = (w[:, :, None] * wk[:, None, :]).reshape(P, -1)
        return idx, w, ok


def _terminal(payoff: PayoffExpr, abs_power: float | None, increments) -> np.ndarray:
    v = payoff.evaluate(increments)
    if abs_power is not None:
        v = np.abs(v) ** abs_power
    return v


def _stage_axes(partition: TimePartition, band: VolatilityBand, cfg: CylinderConfig):
    return tuple(
        StageAxis(cfg.stage_width * band.sigma_max * math.sqrt(t), cfg.stage_points)
        for t in partition.times[1:-1]
    )


def _refine(psi: np.ndarray, axis: StageAxis, y: np.ndarray) -> np.ndarray:
    """Cubic interpolation of ``psi`` (nodes, m) from the axis onto ``y``; linear beyond the axis."""
    m = axis.points
    f = (y + axis.half_width) / axis.spacing
    base, w, inside = stencil(np.clip(f, 0, m - 1), m)
    cols = base[:, None] + np.arange(-1, 3)[None, :]
    out = np.einsum("nyk,yk->ny", psi[:, cols], w)
    lo, hi = f < 0, f > m - 1
    out[:, lo] = psi[:, :1] + (psi[:, 1:2] - psi[:, :1]) * f[lo][None, :]
    out[:, hi] = psi[:, -1:] + (psi[:, -1:] - psi[:, -2:-1]) * (f[hi] - (m - 1))[None, :]
    return out


def backward_eval(
    payoff: PayoffExpr,
    partition: TimePartition | None = None,
    band: VolatilityBand | None = None,
    cfg: CylinderConfig | SolverConfig = CylinderConfig(),
    abs_power: float | None = None,
) -> ConditionalSurface:
    """Compute psi_n, ..., psi_0 for ``payoff`` (or ``|payoff|**abs_power``)."""
    if band is None:
        raise GCalcError("a volatility band is required")
    if partition is not None and partition != payoff.partition:
        raise GCalcError("payoff was resolved against a different partition")
    if isinstance(cfg, SolverConfig):
        cfg = CylinderConfig(solver=cfg)
    if abs_power is not None and not abs_power > 0:
        raise GCalcError("abs_power must be positive")
    part = payoff.partition
    n = part.n
    if n > cfg.n_max:
        raise StageLimitError(f"payoff has {n} increments; the limit is n_max = {cfg.n_max}")
    solver = cfg.solver
    deg = payoff.growth_degree * (abs_power if abs_power is not None else 1)
    deg = int(math.ceil(deg))
    axes = _stage_axes(part, band, cfg)
    mult = 4 if solver.richardson else 1
    psi: list = [None] * n
    stages: list = [None] * n
    grid_error = float("nan")
    m = cfg.stage_points

    for i in range(n - 1, -1, -1):
        dur = part.times[i + 1] - part.times[i]
        coords = np.meshgrid(*(a.grid for a in axes[:i]), indexing="ij")
        coords = [c.reshape(-1, 1) for c in coords]
        n_nodes = coords[0].shape[0] if coords else 1
        if i == n - 1:
            L = solver.resolve_half_width(band, dur, deg)
            nx = solver.nx
            dx = 2 * L / (nx - 1)
            y = np.linspace(-L, L, nx)
            terminal = _terminal(payoff, abs_power, coords + [y[None, :]])
            terminal = np.broadcast_to(terminal, (n_nodes, nx))
        else:
            axis = axes[i]
            dx = axis.spacing / cfg.stage_refine
            need = max(axis.half_width, default_half_width(band, dur, deg))
            half_pts = 2 * math.ceil(need / (2 * dx) - 1e-9)
            nx = 2 * half_pts + 1
            nxt = np.asarray(psi[i + 1]).reshape(n_nodes, m)
            terminal = _refine(nxt, axis, dx * np.arange(-half_pts, half_pts + 1))
        if not np.all(np.isfinite(terminal)):
            raise DomainError("payoff is not finite on the stage grid")

        n_steps = n_time_steps(dur, dx, band, solver.cfl_factor, multiple=mult)
        center = nx // 2
        window = slice(None)
        sched = None
        half_w = center
        if cfg.keep_slabs:
            half_w = min(center - 2, math.ceil(cfg.window_sd * band.sigma_max * math.sqrt(dur) / dx) + 2)
            window = slice(center - half_w, center + half_w + 1)
            width = 2 * half_w + 1
            budget = int(cfg.slab_budget_mb * 2**20 / (8 * n_nodes * width))
            slices = max(2, min(cfg.max_slices, budget))
            sched = terminal_clustered_schedule(n_steps, slices)
        u0, stored, taus = march(terminal, dx, dur, band, n_steps, solver.boundary, store=sched, window=window)
        values = u0[:, center]
        if solver.richardson:
            coarse, _, _ = march(terminal[:, ::2], 2 * dx, dur, band, n_steps // 4, solver.boundary)
            vc = coarse[:, center // 2]
            if i == 0:
                grid_error = float(abs(values[0] - vc[0]) / 3.0)
            values = (4.0 * values - vc) / 3.0
        psi[i] = values.reshape((m,) * i) if i else np.asarray(values[0])
        if cfg.keep_slabs:
            stages[i] = StageSlabs(dur, taus, -half_w * dx, dx, stored)

    label = payoff.text() if abs_power is None else f"abs({payoff.text()})^{abs_power:g}"
    return ConditionalSurface(payoff, band, cfg, axes, psi, stages, abs_power, grid_error, label)


def conditional_at(surface: ConditionalSurface, i: int, observed) -> np.ndarray | float:
    """E^_{t_i}[xi] at observed increments (shape (i,) or (P, i))."""
    n = surface.n
    if not 0 <= i <= n:
        raise GCalcError(f"stage {i} outside 0..{n}")
    if i == 0:
        return surface.value
    obs = np.asarray(observed, dtype=float)
    scalar = obs.ndim <= 1
    obs = obs.reshape(-1, i)
    if obs.shape[1] != i:
        raise GCalcError(f"stage {i} needs {i} observed increments")
    cols = [obs[:, j] for j in range(i)]
    if i == n:
        out = surface.terminal(cols)
    else:
        idx, w, ok = surface.corners(cols)
        if not np.all(ok):
            raise DomainError("observed increments outside the stage grid")
        out = np.sum(w * np.asarray(surface.psi[i]).reshape(-1)[idx], axis=1)
    return float(out[0]) if scalar else np.asarray(out)


def terminal_clustered_schedule(n_steps: int, slices: int) -> np.ndarray:
    """Backward step counts to store, quadratically denser toward the stage end."""
    if slices >= n_steps + 1:
        return np.arange(n_steps + 1)
    s = np.linspace(0.0, 1.0, slices)
    return np.unique(np.round(n_steps * s * s).astype(int))


def partition_marks(partition: TimePartition, n_steps: int, horizon: float) -> list[int]:
    """Simulation step indices of the partition points."""
    if abs(partition.horizon - horizon) > 1e-9 * max(1.0, horizon):
        raise GCalcError(f"path horizon {horizon} differs from partition horizon {partition.horizon}")
    dt = horizon / n_steps
    marks = []
    for t in partition.times:
        k = t / dt
        if abs(k - round(k)) > 1e-6:
            raise GCalcError(f"path grid (dt = {dt}) does not refine partition time {t}")
        marks.append(int(round(k)))
    return marks


def read_along(surface: ConditionalSurface, B: np.ndarray, dt: float, derivatives: bool = True):
    """Read (X, u_x, u_xx, valid) along paths ``B`` of shape (P, K+1).

    X[:, K] is the terminal payoff on the path; derivatives cover steps 0..K-1.
    Paths leaving a slab window or a stage grid are flagged invalid.
    """
    if any(s is None for s in surface.stages):
        raise GCalcError("surface was built without slabs (keep_slabs=False)")
    P, K1 = B.shape
    K = K1 - 1
    marks = partition_marks(surface.partition, K, K * dt)
    incs = [B[:, marks[j + 1]] - B[:, marks[j]] for j in range(surface.n)]
    X = np.empty((P, K1))
    ux = np.empty((P, K)) if derivatives else None
    uxx = np.empty((P, K)) if derivatives else None
    valid = np.ones(P, dtype=bool)
    for i in range(surface.n):
        idx, w, ok = surface.corners(incs[:i], n_paths=P)
        valid &= ok
        k0, k1 = marks[i], marks[i + 1]
        tau = (np.arange(k0, k1) - k0) * dt
        y = B[:, k0:k1] - B[:, k0 : k0 + 1]
        u, dux, duxx, inside = surface.stages[i].query(idx, w, tau, y, derivatives)
        X[:, k0:k1] = u
        if derivatives:
            ux[:, k0:k1] = dux
            uxx[:, k0:k1] = duxx
        valid &= inside
    X[:, K] = surface.terminal(incs)
    return X, ux, uxx, valid


def conditional_process(surface: ConditionalSurface, path_B: np.ndarray, dt: float):
    """X_t = E^_t[xi] along paths; returns (X, valid)."""
    X, _, _, valid = read_along(surface, np.atleast_2d(path_B), dt, derivatives=False)
    return X, valid
