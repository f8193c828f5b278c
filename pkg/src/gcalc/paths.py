"""Volatility controls, path simulation and supremum-over-controls estimators.

Each control h with values in [sigma_min, sigma_max] induces one law of
B_t = int_0^t h_s dW_s; the G-expectation dominates every such expectation, so
maximizing sample means over a finite control set gives a statistical lower
bound of E^. Paths are generated in fixed-size blocks with counter-based draws,
which makes every estimate independent of the thread count.
"""

from __future__ import annotations

import itertools
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .cylinder import ConditionalSurface, partition_marks, read_along
from .model import GCalcError, VolatilityBand
from .rng import INCREMENT_LAWS, block_draws

EXCLUDED_LIMIT = 1e-3


@dataclass(frozen=True)
class SimParams:
    n_paths: int = 100_000
    n_steps: int = 500
    horizon: float = 1.0
    seed: int = 20100101
    increments: str = "rademacher"
    block_size: int = 4096
    threads: int | None = None

    def __post_init__(self):
        if self.n_paths < 2 or self.n_steps < 1:
            raise GCalcError("need n_paths >= 2 and n_steps >= 1")
        if not self.horizon > 0:
            raise GCalcError("horizon must be positive")
        if self.increments not in INCREMENT_LAWS:
            raise GCalcError(f"increments must be one of {INCREMENT_LAWS}")
        if self.block_size < 1:
            raise GCalcError("block_size must be positive")

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @property
    def n_blocks(self) -> int:
        return math.ceil(self.n_paths / self.block_size)

    def worker_count(self) -> int:
        if self.threads is not None:
            return max(1, int(self.threads))
        return max(1, int(os.environ.get("GCALC_THREADS", "1")))


Policy = Callable[[int, float, np.ndarray, float], np.ndarray]


@dataclass(frozen=True)
class VolatilityControl:
    """One volatility process h with values in the band.

    ``constant`` holds ``values[0]``; ``schedule`` holds ``values[j]`` on the
    j-th of len(values) equal intervals of [0, horizon]; ``feedback`` calls
    ``policy(k, t_k, B, dt)`` with the path matrix filled up to column k.
    """

    id: str
    kind: str
    band: VolatilityBand
    values: tuple[float, ...] = ()
    horizon: float | None = None
    policy: Policy | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.kind not in ("constant", "schedule", "feedback"):
            raise GCalcError(f"unknown control kind {self.kind!r}")
        if self.kind != "feedback":
            if not self.values or not self.band.contains(self.values):
                raise GCalcError(f"control {self.id}: values {self.values} outside the band")
        if self.kind == "schedule" and not (self.horizon and self.horizon > 0):
            raise GCalcError("a schedule needs a positive horizon")
        if self.kind == "feedback" and self.policy is None:
            raise GCalcError("a feedback control needs a policy")

    @classmethod
    def constant(cls, sigma: float, band: VolatilityBand) -> "VolatilityControl":
        return cls(f"const:{sigma:.6g}", "constant", band, (float(sigma),))

    @classmethod
    def schedule(cls, values: Sequence[float], horizon: float, band: VolatilityBand) -> "VolatilityControl":
        tag = "".join("H" if v == band.sigma_max else "L" if v == band.sigma_min else f"[{v:g}]" for v in values)
        return cls(f"sched:{tag}", "schedule", band, tuple(float(v) for v in values), float(horizon))

    @classmethod
    def feedback(cls, id: str, policy: Policy, band: VolatilityBand) -> "VolatilityControl":
        return cls(id, "feedback", band, policy=policy)

    def sigma_grid(self, times: np.ndarray) -> np.ndarray:
        """Deterministic sigma at the left endpoints ``times``."""
        if self.kind == "constant":
            return np.full(times.shape, self.values[0])
        if self.kind == "schedule":
            m = len(self.values)
            j = np.minimum((times / self.horizon * m + 1e-9).astype(int), m - 1)
            return np.asarray(self.values)[j]
        raise GCalcError("feedback controls have no deterministic sigma grid")


def surface_feedback(surface: ConditionalSurface, sense: int = 1) -> VolatilityControl:
    """Bang-bang policy from the value curvature.

    sense=+1 uses sigma_max where u_xx >= 0 (attains E^[xi]); sense=-1 is the
    reverse policy, which attains -E^[-xi].
    """
    band = surface.band
    partition = surface.partition
    cache: dict = {}

    def policy(k, t, B, dt):
        K = B.shape[1] - 1
        marks = cache.get(K)
        if marks is None:
            marks = cache.setdefault(K, partition_marks(partition, K, K * dt))
        i = max(j for j in range(surface.n) if marks[j] <= k)
        incs = [B[:, marks[j + 1]] - B[:, marks[j]] for j in range(i)]
        idx, w, _ = surface.corners(incs, n_paths=B.shape[0])
        y = B[:, k] - B[:, marks[i]]
        _, _, uxx, _ = surface.stages[i].query(idx, w, (k - marks[i]) * dt, y)
        return np.where(sense * uxx >= 0, band.sigma_max, band.sigma_min)

    tag = "+" if sense > 0 else "-"
    return VolatilityControl.feedback(f"feedback{tag}:{surface.label or surface.payoff.text()}", policy, band)


def control_family(
    band: VolatilityBand,
    horizon: float,
    n_constants: int = 5,
    schedule_intervals: int = 4,
    surfaces: Sequence[ConditionalSurface] = (),
) -> list[VolatilityControl]:
    """Constants on a sigma grid, bang-bang dyadic schedules, one curvature feedback per surface."""
    out = []
    sigmas = [band.sigma_min] if band.degenerate else np.linspace(band.sigma_min, band.sigma_max, max(n_constants, 2))
    for s in sigmas:
        out.append(VolatilityControl.constant(float(s), band))
    if schedule_intervals and not band.degenerate:
        for combo in itertools.product((band.sigma_min, band.sigma_max), repeat=schedule_intervals):
            if len(set(combo)) > 1:
                out.append(VolatilityControl.schedule(combo, horizon, band))
    for s in surfaces:
        out.append(surface_feedback(s, +1))
    return out


@dataclass(frozen=True)
class PathBundle:
    """Paths of B and <B> under one control; column k is time k*dt."""

    control_id: str
    seed: int
    dt: float
    B: np.ndarray
    qv: np.ndarray
    path_offset: int = 0

    @property
    def n_paths(self) -> int:
        return self.B.shape[0]

    @property
    def n_steps(self) -> int:
        return self.B.shape[1] - 1

    @property
    def horizon(self) -> float:
        return self.n_steps * self.dt

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt

    @property
    def dB(self) -> np.ndarray:
        return np.diff(self.B, axis=1)

    @property
    def dqv(self) -> np.ndarray:
        return np.diff(self.qv, axis=1)

    def to_csv(self, path, functional: np.ndarray | None = None) -> None:
        """One row per path: index, terminal B, terminal qv, functional value."""
        cols = [np.arange(self.n_paths) + self.path_offset, self.B[:, -1], self.qv[:, -1]]
        header = "path,B_T,qv_T"
        if functional is not None:
            cols.append(np.asarray(functional))
            header += ",functional"
        np.savetxt(path, np.column_stack(cols), delimiter=",", header=header, comments="", fmt="%.17g")


def simulate_block(control: VolatilityControl, sim: SimParams, block: int) -> PathBundle:
    p0 = block * sim.block_size
    rows = min(sim.block_size, sim.n_paths - p0)
    if rows <= 0:
        raise GCalcError(f"block {block} is empty")
    K, dt = sim.n_steps, sim.dt
    g = block_draws(sim.seed, control.id, block, rows, K, sim.increments)
    sq = math.sqrt(dt)
    B = np.zeros((rows, K + 1))
    qv = np.zeros((rows, K + 1))
    if control.kind != "feedback":
        sig = control.sigma_grid(np.arange(K) * dt)
        np.cumsum(g * (sig * sq), axis=1, out=B[:, 1:])
        qv[:, 1:] = np.cumsum(sig * sig * dt)
    else:
        band = control.band
        for k in range(K):
            s = np.broadcast_to(np.asarray(control.policy(k, k * dt, B, dt), dtype=float), (rows,))
            if np.any(s < band.sigma_min - 1e-12) or np.any(s > band.sigma_max + 1e-12):
                raise GCalcError(f"feedback control {control.id} left the band")
            B[:, k + 1] = B[:, k] + s * sq * g[:, k]
            qv[:, k + 1] = qv[:, k] + s * s * dt
    return PathBundle(control.id, sim.seed, dt, B, qv, p0)


def map_blocks(control: VolatilityControl, sim: SimParams, fn: Callable[[PathBundle], object]) -> list:
    """Apply ``fn`` to every block bundle; results in block order."""

    def work(b):
        return fn(simulate_block(control, sim, b))

    workers = sim.worker_count()
    if workers == 1 or sim.n_blocks == 1:
        return [work(b) for b in range(sim.n_blocks)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(work, range(sim.n_blocks)))


def simulate(
    control: VolatilityControl,
    n_paths: int,
    n_steps: int,
    T: float,
    seed: int,
    increments: str = "rademacher",
    block_size: int = 4096,
) -> PathBundle:
    sim = SimParams(n_paths, n_steps, T, seed, increments, block_size)
    parts = map_blocks(control, sim, lambda b: b)
    return PathBundle(
        control.id,
        seed,
        sim.dt,
        np.concatenate([p.B for p in parts]),
        np.concatenate([p.qv for p in parts]),
    )


def _integrand(bundle: PathBundle, integrand) -> np.ndarray:
    eta = np.asarray(integrand, dtype=float)
    P, K = bundle.n_paths, bundle.n_steps
    if eta.ndim == 2 and eta.shape == (P, K + 1):
        eta = eta[:, :K]
    try:
        return np.broadcast_to(eta, (P, K))
    except ValueError:
        raise GCalcError(f"integrand shape {eta.shape} does not match paths ({P}, {K})") from None


def ito_integral(bundle: PathBundle, integrand) -> np.ndarray:
    """Left-endpoint sums sum_k eta_k (B_{k+1} - B_k), per path."""
    return np.sum(_integrand(bundle, integrand) * bundle.dB, axis=1)


def ito_process(bundle: PathBundle, integrand) -> np.ndarray:
    """Running Ito sums, shape (P, K+1) starting at 0."""
    out = np.zeros_like(bundle.B)
    np.cumsum(_integrand(bundle, integrand) * bundle.dB, axis=1, out=out[:, 1:])
    return out


def qv_integral(bundle: PathBundle, integrand) -> np.ndarray:
    """sum_k eta_k (<B>_{k+1} - <B>_k), per path."""
    return np.sum(_integrand(bundle, integrand) * bundle.dqv, axis=1)


@dataclass
class EstimateReport:
    value: float
    std_error: float
    best_control: str
    n_controls: int
    seed: int
    per_control: dict = field(default_factory=dict)
    excluded_fraction: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def _summarize(vals: np.ndarray) -> dict:
    ok = np.isfinite(vals)
    v = vals[ok]
    n = int(v.size)
    mean = float(np.mean(v)) if n else float("nan")
    se = float(np.std(v, ddof=1) / math.sqrt(n)) if n > 1 else float("nan")
    return {"mean": mean, "std_error": se, "n": n, "excluded": int(vals.size - n)}


def per_control_values(functional: Callable[[PathBundle], np.ndarray], controls, sim: SimParams) -> dict:
    """Per-path functional values for each control (NaN marks excluded paths)."""
    if not controls:
        raise GCalcError("the control set is empty")
    out = {}
    for c in controls:
        out[c.id] = np.concatenate(map_blocks(c, sim, lambda b: np.asarray(functional(b), dtype=float)))
    return out


def report_from_values(values: dict, sim: SimParams) -> EstimateReport:
    stats = {cid: _summarize(v) for cid, v in values.items()}
    best = max(stats, key=lambda cid: (stats[cid]["mean"], -list(stats).index(cid)))
    total = sum(v.size for v in values.values())
    excluded = sum(s["excluded"] for s in stats.values()) / total
    return EstimateReport(
        value=stats[best]["mean"],
        std_error=stats[best]["std_error"],
        best_control=best,
        n_controls=len(stats),
        seed=sim.seed,
        per_control=stats,
        excluded_fraction=excluded,
    )


def sup_expect(functional: Callable[[PathBundle], np.ndarray], controls, sim: SimParams) -> EstimateReport:
    """Max over controls of the sample mean of ``functional``: a lower bound of E^."""
    return report_from_values(per_control_values(functional, controls, sim), sim)


def terminal_functional(surface_or_payoff) -> Callable[[PathBundle], np.ndarray]:
    """Path functional evaluating a payoff (or a surface's terminal) on the partition increments."""
    term = getattr(surface_or_payoff, "terminal", None) or surface_or_payoff.evaluate
    partition = surface_or_payoff.partition

    def fn(bundle: PathBundle) -> np.ndarray:
        marks = partition_marks(partition, bundle.n_steps, bundle.horizon)
        incs = [bundle.B[:, marks[j + 1]] - bundle.B[:, marks[j]] for j in range(partition.n)]
        return term(incs)

    return fn


def gevaluation(surface: ConditionalSurface, controls, sim: SimParams) -> EstimateReport:
    """Lower bound of E^[sup_u E^_u(xi)] from running maxima of the conditional process."""

    def running_max(bundle: PathBundle) -> np.ndarray:
        X, _, _, valid = read_along(surface, bundle.B, bundle.dt, derivatives=False)
        out = X.max(axis=1)
        out[~valid] = np.nan
        return out

    rep = sup_expect(running_max, controls, sim)
    if rep.excluded_fraction >= EXCLUDED_LIMIT:
        raise GCalcError(f"{rep.excluded_fraction:.2%} of paths left the slab domain (limit 0.1%)")
    return rep


def capacity_estimate(event: Callable[[PathBundle], np.ndarray], controls, sim: SimParams) -> EstimateReport:
    """Lower bound of sup_P P(A): max empirical frequency, binomial standard error."""
    values = per_control_values(lambda b: np.asarray(event(b), dtype=bool).astype(float), controls, sim)
    rep = report_from_values(values, sim)
    for s in rep.per_control.values():
        p, n = s["mean"], s["n"]
        s["std_error"] = math.sqrt(max(p * (1 - p), 0.0) / n)
    rep.std_error = rep.per_control[rep.best_control]["std_error"]
    return rep


def hp_norm(controls, integrand: Callable[[PathBundle], np.ndarray], p: float, sim: SimParams) -> float:
    """(sup_controls mean (sum eta_k^2 dt)^(p/2))^(1/p)."""
    if p < 1:
        raise GCalcError("hp_norm needs p >= 1")

    def fn(bundle):
        eta = _integrand(bundle, integrand(bundle))
        return np.sum(eta * eta, axis=1) ** (p / 2) * bundle.dt ** (p / 2)

    rep = sup_expect(fn, controls, sim)
    return rep.value ** (1.0 / p)
