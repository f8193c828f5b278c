"""Martingale decomposition along simulated paths and the inequality checks built on it.

Along a path, the conditional process X_t = u(t, B_t) splits as
X = X_0 + int Z dB - K with Z = u_x, eta = u_xx / 2 and
dK = 2 G(eta) dt - eta d<B>. K is accumulated from eta and <B>, so it is
nondecreasing by construction; the residual X - (M - K) measures scheme error.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .cylinder import ConditionalSurface, CylinderConfig, backward_eval, read_along
from .model import (
    ExponentError,
    GCalcError,
    TimePartition,
    VolatilityBand,
    conjugate_exponent,
    g_of,
    series_constant,
)
from .paths import (
    EXCLUDED_LIMIT,
    EstimateReport,
    PathBundle,
    SimParams,
    VolatilityControl,
    control_family,
    gevaluation,
    map_blocks,
    report_from_values,
    sup_expect,
    terminal_functional,
)
from .payoff import Add, Neg, PayoffExpr

LEMMA32_FACTOR = 14.0
SCALE_FLOOR = 1e-2


@dataclass(frozen=True)
class Decomposition:
    """Decomposition series for a set of paths; step arrays have K columns, level arrays K+1."""

    dt: float
    X: np.ndarray
    Z: np.ndarray
    eta: np.ndarray
    K: np.ndarray
    M: np.ndarray
    valid: np.ndarray

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.X.shape[1]) * self.dt

    @property
    def X0(self) -> float:
        return float(self.X[0, 0])

    @property
    def dK(self) -> np.ndarray:
        return np.diff(self.K, axis=1)

    @property
    def residual(self) -> np.ndarray:
        return self.X - (self.M - self.K)

    @property
    def reconstruction_error(self) -> np.ndarray:
        """max_t |X_t - (M_t - K_t)| per path."""
        return np.max(np.abs(self.residual), axis=1)

    @property
    def excluded_fraction(self) -> float:
        return float(1.0 - self.valid.mean())


def decompose(surface: ConditionalSurface, bundle: PathBundle, max_excluded: float = EXCLUDED_LIMIT) -> Decomposition:
    X, ux, uxx, valid = read_along(surface, bundle.B, bundle.dt)
    excluded = 1.0 - valid.mean()
    if excluded >= max_excluded:
        raise GCalcError(f"{excluded:.3%} of paths left the slab domain (limit {max_excluded:.1%})")
    eta = 0.5 * uxx
    dK = 2.0 * g_of(eta, surface.band) * bundle.dt - eta * bundle.dqv
    K = np.zeros_like(X)
    np.cumsum(dK, axis=1, out=K[:, 1:])
    M = np.empty_like(X)
    M[:, 0] = X[:, 0]
    np.cumsum(ux * bundle.dB, axis=1, out=M[:, 1:])
    M[:, 1:] += X[:, :1]
    return Decomposition(bundle.dt, X, ux, eta, K, M, valid)


DecompFunctional = Callable[[list, PathBundle], np.ndarray]


def decomposition_values(
    surfaces: Sequence[ConditionalSurface],
    controls: Sequence[VolatilityControl],
    sim: SimParams,
    functionals: dict[str, DecompFunctional],
) -> tuple[dict, float]:
    """Per-path functionals of the decompositions of ``surfaces`` on shared paths.

    Returns ({name: {control id: values}}, excluded fraction); excluded paths
    carry NaN.
    """

    def block(bundle: PathBundle):
        decs = [decompose(s, bundle, max_excluded=1.0) for s in surfaces]
        ok = np.logical_and.reduce([d.valid for d in decs])
        out = {}
        for name, fn in functionals.items():
            v = np.array(fn(decs, bundle), dtype=float)
            v[~ok] = np.nan
            out[name] = v
        return out

    values: dict = {name: {} for name in functionals}
    for c in controls:
        parts = map_blocks(c, sim, block)
        for name in functionals:
            values[name][c.id] = np.concatenate([p[name] for p in parts])
    first = next(iter(values.values()))
    total = sum(v.size for v in first.values())
    excluded = sum(int(np.isnan(v).sum()) for v in first.values()) / total
    if excluded >= EXCLUDED_LIMIT:
        raise GCalcError(f"{excluded:.3%} of paths left the slab domain (limit {EXCLUDED_LIMIT:.1%})")
    return values, excluded


def default_controls(surfaces: Sequence[ConditionalSurface], sim: SimParams) -> list[VolatilityControl]:
    """Standard family plus feedbacks from each surface and from its negated payoff.

    The negated-payoff feedback minimizes E_P[xi], so it is the law attaining
    sup_P E_P[K_T] = E^[xi] + E^[-xi].
    """
    feeds = []
    for s in surfaces:
        feeds.append(s)
        if s.abs_power is None:
            feeds.append(backward_eval(s.payoff.negate(), band=s.band, cfg=s.cfg))
    return control_family(surfaces[0].band, sim.horizon, surfaces=feeds)


@dataclass
class DecompositionSummary:
    payoff: str
    X0: float
    payoff_scale: float
    reconstruction_tol: float
    worst_pass_fraction: float
    min_dK: float
    max_abs_K0: float
    max_abs_K: float
    expected_K: dict
    expected_neg_K: dict
    martingale_up: dict
    martingale_down: dict
    excluded_fraction: float
    per_control: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def summarize_decomposition(
    surface: ConditionalSurface,
    sim: SimParams,
    controls: Sequence[VolatilityControl] | None = None,
    rec_rel_tol: float = 0.01,
) -> DecompositionSummary:
    """Structural checks of the decomposition over a control family.

    The reconstruction tolerance is ``rec_rel_tol`` times the payoff scale,
    the largest RMS payoff over the controls (floored).
    """
    controls = list(controls) if controls is not None else default_controls([surface], sim)
    fns = {
        "xi": lambda d, b: d[0].X[:, -1],
        "rec": lambda d, b: d[0].reconstruction_error,
        "min_dK": lambda d, b: d[0].dK.min(axis=1),
        "K0": lambda d, b: np.abs(d[0].K[:, 0]),
        "maxK": lambda d, b: np.abs(d[0].K).max(axis=1),
        "K_T": lambda d, b: d[0].K[:, -1],
        "negK_T": lambda d, b: -d[0].K[:, -1],
        "M_up": lambda d, b: d[0].M[:, -1] - d[0].X0,
        "M_down": lambda d, b: d[0].X0 - d[0].M[:, -1],
    }
    vals, excluded = decomposition_values([surface], controls, sim, fns)
    # one scale for all controls: the largest RMS payoff, an empirical L^2_G norm
    scale = max(max(float(np.sqrt(np.nanmean(v * v))) for v in vals["xi"].values()), SCALE_FLOOR)
    tol = rec_rel_tol * scale
    per_control = {}
    for c in controls:
        rec = vals["rec"][c.id]
        ok = rec[np.isfinite(rec)]
        per_control[c.id] = {
            "pass_fraction": float(np.mean(ok <= tol)),
            "max_rec_error": float(ok.max()),
            "min_dK": float(np.nanmin(vals["min_dK"][c.id])),
        }
    reports = {k: report_from_values(vals[k], sim).to_dict() for k in ("K_T", "negK_T", "M_up", "M_down")}
    for r in reports.values():
        r.pop("per_control")
    return DecompositionSummary(
        payoff=surface.label,
        X0=surface.value,
        payoff_scale=scale,
        reconstruction_tol=tol,
        worst_pass_fraction=min(p["pass_fraction"] for p in per_control.values()),
        min_dK=min(p["min_dK"] for p in per_control.values()),
        max_abs_K0=max(float(np.nanmax(v)) for v in vals["K0"].values()),
        max_abs_K=max(float(np.nanmax(v)) for v in vals["maxK"].values()),
        expected_K=reports["K_T"],
        expected_neg_K=reports["negK_T"],
        martingale_up=reports["M_up"],
        martingale_down=reports["M_down"],
        excluded_fraction=excluded,
        per_control=per_control,
    )


@dataclass
class InequalityReport:
    check: str
    lhs: float
    rhs: float
    holds: bool
    tolerance: float
    constants: dict = field(default_factory=dict)
    seeds: list = field(default_factory=list)
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, default=float)


def _grid_tol(*surfaces: ConditionalSurface) -> float:
    return float(sum(s.grid_error for s in surfaces if math.isfinite(s.grid_error)))


def _check_gamma(gamma: float, upper: float, upper_name: str, check: str) -> None:
    if not gamma > 1:
        raise ExponentError(f"{check}: gamma = {gamma} must exceed 1")
    if gamma > 2:
        raise ExponentError(f"{check}: gamma = {gamma} rejected, gamma <= 2 required")
    if not gamma < upper:
        raise ExponentError(f"{check}: gamma = {gamma} must be below {upper_name} = {upper:g}")


Series = Callable[[np.ndarray, np.ndarray], np.ndarray] | float


def _series(s: Series, t: np.ndarray, x: np.ndarray) -> np.ndarray:
    if callable(s):
        return np.broadcast_to(np.asarray(s(t, x), dtype=float), np.broadcast(t, x).shape)
    return np.full(np.broadcast(t, x).shape, float(s))


def eta_matching_control(eta: Series, band: VolatilityBand, id: str = "eta-matching") -> VolatilityControl:
    """sigma_max where eta >= 0, sigma_min elsewhere; makes eta d<B> = 2 G(eta) dt."""

    def policy(k, t, B, dt):
        return np.where(_series(eta, np.asarray(t), B[:, k]) >= 0, band.sigma_max, band.sigma_min)

    return VolatilityControl.feedback(id, policy, band)


def verify_martingale_construction(
    Z: Series,
    eta: Series,
    controls: Sequence[VolatilityControl],
    sim: SimParams,
    band: VolatilityBand,
    x: float = 0.0,
) -> InequalityReport:
    """M_T = x + int Z dB + int eta d<B> - int 2G(eta) dt has E^[M_T] = x.

    ``Z`` and ``eta`` are constants or Markov functions f(t, B_t). Every
    per-control mean of M_T - x must be <= 3 SE, and the best must reach 0.
    Add :func:`eta_matching_control` to ``controls`` for the attaining law.
    """

    def fn(b: PathBundle):
        t = b.times[None, :-1]
        Bk = b.B[:, :-1]
        z = _series(Z, t, Bk)
        e = _series(eta, t, Bk)
        return np.sum(z * b.dB + e * b.dqv - 2.0 * g_of(e, band) * b.dt, axis=1)

    rep = sup_expect(fn, controls, sim)
    tol = 3.0 * rep.std_error + 1e-12
    every_below = all(s["mean"] <= 3.0 * s["std_error"] + 1e-12 for s in rep.per_control.values())
    attained = abs(rep.value) <= tol
    return InequalityReport(
        check="martingale_construction",
        lhs=rep.value,
        rhs=0.0,
        holds=bool(every_below and attained),
        tolerance=tol,
        constants={"x": x},
        seeds=[sim.seed],
        details={"best_control": rep.best_control, "every_control_below": every_below, "attained": attained,
                 "per_control": rep.per_control},
    )


def mean_uncertainty(
    payoff: PayoffExpr,
    partition: TimePartition | None = None,
    band: VolatilityBand | None = None,
    cfg: CylinderConfig = CylinderConfig(),
) -> float:
    """E^[xi] + E^[-xi]; zero exactly when xi is symmetric."""
    up = backward_eval(payoff, partition, band, cfg)
    down = backward_eval(payoff.negate(), partition, band, cfg)
    return up.value + down.value


def _cyl(cfg: CylinderConfig, keep: bool) -> CylinderConfig:
    return replace(cfg, keep_slabs=keep)


def verify_lemma32(
    payoff: PayoffExpr,
    band: VolatilityBand,
    sim: SimParams,
    beta: float = 2.0,
    gamma: float = 1.5,
    cfg: CylinderConfig = CylinderConfig(),
    controls: Sequence[VolatilityControl] | None = None,
) -> InequalityReport:
    """sup mean K_T^gamma <= 14 C_{beta/gamma}^gamma E^|xi|^beta, plus symmetry of xi + K_T."""
    _check_gamma(gamma, beta, "beta", "lemma32")
    surface = backward_eval(payoff, band=band, cfg=cfg)
    norm = backward_eval(payoff, band=band, cfg=_cyl(cfg, False), abs_power=beta)
    c = series_constant(beta / gamma)
    rhs = LEMMA32_FACTOR * c.value**gamma * norm.value
    controls = list(controls) if controls is not None else default_controls([surface], sim)
    vals, excluded = decomposition_values(
        [surface],
        controls,
        sim,
        {
            "Kg": lambda d, b: np.maximum(d[0].K[:, -1], 0.0) ** gamma,
            "sym_up": lambda d, b: d[0].X[:, -1] + d[0].K[:, -1],
            "sym_down": lambda d, b: -(d[0].X[:, -1] + d[0].K[:, -1]),
        },
    )
    lhs_rep = report_from_values(vals["Kg"], sim)
    up = report_from_values(vals["sym_up"], sim)
    down = report_from_values(vals["sym_down"], sim)
    # slack of the series bracket enters through C^gamma
    series_tol = LEMMA32_FACTOR * (c.upper**gamma - c.value**gamma) * norm.value
    tol = 3.0 * lhs_rep.std_error + series_tol + LEMMA32_FACTOR * c.value**gamma * _grid_tol(norm)
    sym_gap = up.value + down.value
    sym_tol = 3.0 * (up.std_error + down.std_error) + 0.01 * max(abs(surface.value), SCALE_FLOOR)
    return InequalityReport(
        check="lemma32",
        lhs=lhs_rep.value,
        rhs=rhs,
        holds=bool(lhs_rep.value <= rhs + tol),
        tolerance=tol,
        constants={"beta": beta, "gamma": gamma, "C": c.value, "factor": LEMMA32_FACTOR},
        seeds=[sim.seed],
        details={
            "payoff": payoff.text(),
            "bounded": payoff.bounded,
            "E_abs_xi_beta": norm.value,
            "best_control": lhs_rep.best_control,
            "lhs_std_error": lhs_rep.std_error,
            "symmetry_gap": sym_gap,
            "symmetry_tol": sym_tol,
            "symmetric": bool(abs(sym_gap) <= sym_tol),
            "excluded_fraction": excluded,
        },
    )


def thm33_rhs(norm: float, alpha: float, delta: float, gamma: float) -> tuple[float, dict]:
    """gamma* {|xi|^alpha + 14^(1/gamma) C_{beta/gamma} |xi|^((alpha+delta)/gamma)} for the L^(alpha+delta) norm."""
    beta = (alpha + delta) / alpha
    c = series_constant(beta / gamma)
    gs = conjugate_exponent(gamma)
    rhs = gs * (norm**alpha + LEMMA32_FACTOR ** (1 / gamma) * c.value * norm ** ((alpha + delta) / gamma))
    return rhs, {"alpha": alpha, "delta": delta, "gamma": gamma, "beta": beta, "gamma_star": gs,
                 "C": c.value, "C_upper": c.upper, "factor": LEMMA32_FACTOR}


def verify_thm33(
    payoff: PayoffExpr,
    band: VolatilityBand,
    sim: SimParams,
    alpha: float = 1.0,
    delta: float = 1.0,
    gamma: float = 1.5,
    cfg: CylinderConfig = CylinderConfig(),
    controls: Sequence[VolatilityControl] | None = None,
) -> InequalityReport:
    """G-evaluation of |xi|^alpha (MC lower bound) against the norm bound."""
    if alpha < 1:
        raise ExponentError(f"thm33: alpha = {alpha} must be >= 1")
    if not delta > 0:
        raise ExponentError(f"thm33: delta = {delta} must be positive")
    beta = (alpha + delta) / alpha
    _check_gamma(gamma, beta, "(alpha+delta)/alpha", "thm33")
    surface = backward_eval(payoff, band=band, cfg=cfg, abs_power=alpha)
    high = backward_eval(payoff, band=band, cfg=_cyl(cfg, False), abs_power=alpha + delta)
    norm = max(high.value, 0.0) ** (1 / (alpha + delta))
    rhs, consts = thm33_rhs(norm, alpha, delta, gamma)
    controls = list(controls) if controls is not None else default_controls([surface], sim)
    rep = gevaluation(surface, controls, sim)
    tol = 3.0 * rep.std_error + _grid_tol(high)
    floor = surface.value - 3.0 * rep.std_error - _grid_tol(surface) - 1e-12
    consts["norm"] = norm
    return InequalityReport(
        check="thm33",
        lhs=rep.value,
        rhs=rhs,
        holds=bool(rep.value <= rhs + tol),
        tolerance=tol,
        constants=consts,
        seeds=[sim.seed],
        details={
            "payoff": payoff.text(),
            "E_abs_xi_alpha": surface.value,
            "gevaluation_std_error": rep.std_error,
            "best_control": rep.best_control,
            "dominates_expectation": bool(rep.value >= floor),
            "excluded_fraction": rep.excluded_fraction,
        },
    )


def cor34_constant(gamma: float = 1.5) -> float:
    """[gamma* (1 + 14^(1/gamma) C_{2/gamma})]^2, the G-evaluation bound constant at alpha = delta = 1."""
    _check_gamma(gamma, 2.0, "2", "cor34")
    c = series_constant(2.0 / gamma).value
    return (conjugate_exponent(gamma) * (1 + LEMMA32_FACTOR ** (1 / gamma) * c)) ** 2


def _range_check(payoff: PayoffExpr, band: VolatilityBand, lo: float, hi: float, points: int = 41) -> None:
    durs = payoff.partition.durations
    axes = [np.linspace(-6 * band.sigma_max * math.sqrt(d), 6 * band.sigma_max * math.sqrt(d), points) for d in durs]
    grids = np.meshgrid(*axes, indexing="ij")
    v = payoff.evaluate([g.reshape(-1) for g in grids])
    if np.min(v) < lo - 1e-12 or np.max(v) > hi + 1e-12:
        raise GCalcError(f"payoff {payoff.text()} leaves [{lo}, {hi}]; wrap it in clamp(., 0, 1)")


def verify_cor34(
    payoff: PayoffExpr,
    band: VolatilityBand,
    sim: SimParams,
    gamma: float = 1.5,
    cfg: CylinderConfig = CylinderConfig(),
    controls: Sequence[VolatilityControl] | None = None,
) -> InequalityReport:
    """[E(phi)]^2 <= C E^(phi) for 0 <= phi <= 1."""
    _range_check(payoff, band, 0.0, 1.0)
    C = cor34_constant(gamma)
    surface = backward_eval(payoff, band=band, cfg=cfg)
    controls = list(controls) if controls is not None else default_controls([surface], sim)
    rep = gevaluation(surface, controls, sim)
    lhs = rep.value**2
    tol = 6.0 * abs(rep.value) * rep.std_error + C * _grid_tol(surface)
    rhs = C * surface.value
    return InequalityReport(
        check="cor34",
        lhs=lhs,
        rhs=rhs,
        holds=bool(lhs <= rhs + tol),
        tolerance=tol,
        constants={"gamma": gamma, "C": C},
        seeds=[sim.seed],
        details={"payoff": payoff.text(), "gevaluation": rep.value, "E_phi": surface.value,
                 "best_control": rep.best_control, "excluded_fraction": rep.excluded_fraction},
    )


def verify_cor49(
    payoff: PayoffExpr,
    other: PayoffExpr,
    band: VolatilityBand,
    sim: SimParams,
    alpha: float = 1.2,
    beta: float = 2.0,
    gamma: float = 1.5,
    cfg: CylinderConfig = CylinderConfig(),
    controls: Sequence[VolatilityControl] | None = None,
) -> InequalityReport:
    """Measure the smallest constant satisfying both K_T and M_T - M'_T bounds.

    ``lhs`` is the measured constant; ``rhs`` is infinite since no constant is
    asserted, so ``holds`` only reports that the measurement is finite.
    """
    if not 1 < alpha < beta:
        raise ExponentError(f"cor49: need 1 < alpha < beta, got alpha = {alpha}, beta = {beta}")
    _check_gamma(gamma, beta / alpha, "beta/alpha", "cor49")
    if payoff.partition != other.partition:
        raise GCalcError("cor49: both payoffs must share a partition")
    s1 = backward_eval(payoff, band=band, cfg=cfg)
    s2 = backward_eval(other, band=band, cfg=cfg)
    diff = PayoffExpr(Add(payoff.root, Neg(other.root)), payoff.partition)
    nocyl = _cyl(cfg, False)

    def beta_norm(p):
        return max(backward_eval(p, band=band, cfg=nocyl, abs_power=beta).value, 0.0) ** (1 / beta)

    n1, n2, nd = beta_norm(payoff), beta_norm(other), beta_norm(diff)
    controls = list(controls) if controls is not None else default_controls([s1, s2], sim)
    vals, excluded = decomposition_values(
        [s1, s2],
        controls,
        sim,
        {
            "K": lambda d, b: np.abs(d[0].K[:, -1]) ** alpha,
            "M": lambda d, b: np.abs(d[0].M[:, -1] - d[1].M[:, -1]) ** alpha,
        },
    )
    k_rep = report_from_values(vals["K"], sim)
    m_rep = report_from_values(vals["M"], sim)
    q = beta / gamma
    A1 = n1**alpha + n1**q
    A = nd**alpha + nd**q
    W = 1 + n1**q + n2**q
    C1 = k_rep.value / A1 if A1 > 0 else (0.0 if k_rep.value <= 1e-12 else math.inf)
    denom = A + math.sqrt(A * W)
    C2 = m_rep.value / denom if denom > 0 else (0.0 if m_rep.value <= 1e-12 else math.inf)
    C = max(C1, C2)
    return InequalityReport(
        check="cor49",
        lhs=C,
        rhs=math.inf,
        holds=bool(math.isfinite(C)),
        tolerance=0.0,
        constants={"alpha": alpha, "beta": beta, "gamma": gamma, "C_K": C1, "C_M": C2},
        seeds=[sim.seed],
        details={
            "payoff": payoff.text(),
            "other": other.text(),
            "norm_xi": n1,
            "norm_other": n2,
            "norm_diff": nd,
            "E_abs_K_alpha": k_rep.value,
            "E_abs_dM_alpha": m_rep.value,
            "K_std_error": k_rep.std_error,
            "dM_std_error": m_rep.std_error,
            "excluded_fraction": excluded,
        },
    )


def z_hp_norm(surface: ConditionalSurface, sim: SimParams, p: float, controls=None) -> float:
    """Empirical H^p norm of Z = u_x; whether it is finite in general is left open."""
    controls = list(controls) if controls is not None else default_controls([surface], sim)
    vals, _ = decomposition_values(
        [surface], controls, sim, {"z": lambda d, b: (np.sum(d[0].Z**2, axis=1) * b.dt) ** (p / 2)}
    )
    return report_from_values(vals["z"], sim).value ** (1 / p)


__all__ = [
    "Decomposition",
    "DecompositionSummary",
    "EstimateReport",
    "InequalityReport",
    "cor34_constant",
    "decompose",
    "decomposition_values",
    "default_controls",
    "eta_matching_control",
    "mean_uncertainty",
    "summarize_decomposition",
    "terminal_functional",
    "thm33_rhs",
    "verify_cor34",
    "verify_cor49",
    "verify_lemma32",
    "verify_martingale_construction",
    "verify_thm33",
    "z_hp_norm",
]
