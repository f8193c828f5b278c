"""Conditional-expectation property checks shared by unit and acceptance tests.

Each check returns the worst relative deviation; a property holds
when the deviation is at most REL_TOL. Deviations are measured relative to
max(|reference|, 1).
"""

from __future__ import annotations

import itertools

import numpy as np
from scipy.interpolate import CubicSpline

from gcalc import GridFunction, SolverConfig, TimePartition, VolatilityBand, backward_eval, parse_payoff, solve_gheat
from gcalc.cylinder import CylinderConfig

REL_TOL = 1e-3
BAND = VolatilityBand(1.0, 2.0)
# Mixed-curvature quartics with O(1) coefficients cancel to small expectations,
# so 1e-3 needs finer grids than the defaults: 121 stage points, and a finer
# last stage except for three-stage payoffs, where the cost would be minutes.
CFG_FINE = CylinderConfig(solver=SolverConfig(nx=1601, richardson=True), stage_points=121, keep_slabs=False)
CFG_3 = CylinderConfig(solver=SolverConfig(nx=401, richardson=True), stage_points=121, keep_slabs=False)
P2 = TimePartition((0.0, 0.5, 1.0))
P3 = TimePartition((0.0, 0.5, 0.75, 1.0))
THIRDS = TimePartition((0.0, 1 / 3, 2 / 3, 1.0))

# one-variable shapes; "{0}" is the argument
SHAPES = [
    "{0}^2",
    "-({0}^2)",
    "{0}^3",
    "{0}^2-0.25*{0}^4",
    "clamp({0},-1,2)",
    "abs({0})",
    "max({0},0)-0.5*{0}^2",
]


def rel(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), 1.0)))


def evaluate(text, part, band=BAND, cfg=None):
    if cfg is None:
        cfg = CFG_3 if part.n == 3 else CFG_FINE
    return backward_eval(parse_payoff(text, part), band=band, cfg=cfg)


def random_polynomial(rng, n):
    """Random polynomial of degree <= 3 in D(1)..D(n) with small coefficients."""
    terms = []
    for _ in range(rng.integers(2, 5)):
        deg = rng.integers(1, 4)
        idx = rng.integers(1, n + 1, size=deg)
        coef = round(float(rng.uniform(-1, 1)), 2)
        terms.append(f"{coef}*" + "*".join(f"D({j})" for j in idx))
    return "+".join(terms).replace("+-", "-")


def check_monotone(text, extra, part):
    """Adding a nonnegative term never lowers any psi_i (positive part of the gap)."""
    s, t = evaluate(text, part), evaluate(f"{text}+{extra}", part)
    worst = 0.0
    for a, b in zip(s.psi, t.psi):
        a, b = np.asarray(a), np.asarray(b)
        worst = max(worst, float(np.max(np.maximum(a - b, 0.0) / np.maximum(np.abs(b), 1.0))))
    return worst


def check_constant(c, part):
    # exact at any resolution; a coarse grid keeps the three-stage case fast
    s = evaluate(repr(c), part, cfg=CylinderConfig(solver=SolverConfig(nx=101), keep_slabs=False))
    return max(rel(p, np.full(np.shape(p), c)) for p in s.psi)


def check_positive_homogeneity(eta_shape, phi_shape):
    """xi = eta(D1) * phi(D2): psi_1(x) = eta(x)^+ E[phi] + eta(x)^- E[-phi]."""
    eta = eta_shape.format("D(1)")
    phi = phi_shape.format("D(2)")
    s = evaluate(f"({eta})*({phi})", P2)
    half = TimePartition((0.0, 0.5))
    up = evaluate(phi_shape.format("D(1)"), half).value
    down = evaluate("-(" + phi_shape.format("D(1)") + ")", half).value
    x = s.axes[0].grid
    e = parse_payoff(eta, P2).evaluate([x, np.zeros_like(x)])
    expected = np.maximum(e, 0) * up + np.maximum(-e, 0) * down
    return rel(s.psi[1], expected)


def _resolve(values, grid, duration, half_width, nx=801):
    f = CubicSpline(grid, values, extrapolate=True)
    g = GridFunction.sample(f, half_width, nx)
    return solve_gheat(g, duration, BAND, SolverConfig(nx=nx, richardson=True)).value


def check_tower(text, part, nodes=5):
    """Re-solving from psi_i reproduces psi_{i-1} at nodes near the origin."""
    s = evaluate(text, part)
    m = s.cfg.stage_points
    c = m // 2
    worst = 0.0
    for i in range(1, s.n):
        axis = s.axes[i - 1]
        dur = part.times[i] - part.times[i - 1]
        psi = np.asarray(s.psi[i])
        picks = range(c - nodes // 2 * 3, c + nodes // 2 * 3 + 1, 3)
        for node in itertools.product(picks, repeat=i - 1):
            line = psi[node] if node else psi
            want = np.asarray(s.psi[i - 1])[node] if node else s.value
            got = _resolve(line, axis.grid, dur, axis.half_width)
            worst = max(worst, rel(got, want))
    return worst


def check_future_only(text, part, i):
    """A payoff of increments after t_i has a constant psi_i."""
    s = evaluate(text, part)
    p = np.asarray(s.psi[i])
    return rel(p, np.full(p.shape, s.value))


def check_scaling(coefs, shape):
    """Equal intervals: E[phi(sum a_k D_k)] = E[phi(|a| D_1')] with D_1' over one interval."""
    n = len(coefs)
    part = P2 if n == 2 else THIRDS
    arg = "(" + "+".join(f"{a}*D({k + 1})" for k, a in enumerate(coefs)) + ")"
    multi = evaluate(shape.format(arg), part).value
    r = float(np.sqrt(np.sum(np.square(coefs))))
    single = evaluate(shape.format(f"({r!r}*D(1))"), TimePartition((0.0, part.times[1]))).value
    return rel(multi, single)
