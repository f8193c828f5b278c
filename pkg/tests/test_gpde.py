import math

import numpy as np
import pytest

from scipy.integrate import quad
from scipy.stats import norm

from gcalc import GridFunction, SolverConfig, VolatilityBand, gnormal_expect, solve_gheat
from gcalc.gpde import CFLError, DomainError, derivatives_at, march
from gcalc.model import GCalcError

BAND = VolatilityBand(1.0, 2.0)
RICH = SolverConfig(richardson=True)


def _solve(f, duration=1.0, band=BAND, L=None, nx=401, **kw):
    L = L or 8 * band.sigma_max * math.sqrt(duration) * 3
    return solve_gheat(GridFunction.sample(f, L, nx), duration, band, SolverConfig(nx=nx, **kw))


def test_linear_is_fixed_point():
    s = _solve(lambda x: x)
    assert s.value == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(s.u[0], s.x, atol=1e-10)


@pytest.mark.parametrize("sign, want", [(1, 4.0), (-1, -1.0)])
def test_quadratic_uses_extreme_volatility(sign, want):
    assert _solve(lambda x: sign * x * x).value == pytest.approx(want, abs=1e-9)


def test_terminal_slice_is_terminal_data():
    g = GridFunction.sample(np.cos, 10.0, 201)
    s = solve_gheat(g, 0.5, BAND)
    np.testing.assert_array_equal(s.u[-1], g.values)
    assert s.times[-1] == pytest.approx(0.5) and s.times[0] == pytest.approx(0.0)


def test_interior_slices_satisfy_scheme():
    g = GridFunction.sample(lambda x: np.abs(x) - 0.1 * x**2, 10.0, 101)
    s = solve_gheat(g, 0.25, BAND)
    # consecutive stored slices are one explicit step apart
    dt = s.times[1] - s.times[0]
    r = dt / s.dx**2
    d2 = s.u[1, 2:] - 2 * s.u[1, 1:-1] + s.u[1, :-2]
    step = s.u[1, 1:-1] + r * 0.5 * np.where(d2 > 0, BAND.var_max, BAND.var_min) * d2
    np.testing.assert_allclose(s.u[0, 1:-1], step, atol=1e-12)


def test_gnormal_quartic():
    assert gnormal_expect(lambda x: x**4, 1.0, BAND, RICH, growth_degree=4) == pytest.approx(48.0, rel=5e-3)


@pytest.mark.parametrize("c", [-3.0, 0.0, 5.5])
def test_gnormal_constant_exact(c):
    assert gnormal_expect(lambda x: np.full_like(x, c), 1.0, BAND) == c


def test_gnormal_abs():
    v = gnormal_expect(np.abs, 1.0, BAND, RICH, growth_degree=1)
    assert v == pytest.approx(2 * math.sqrt(2 / math.pi), rel=5e-3)


def test_gnormal_rejects_nonpositive_time():
    with pytest.raises(GCalcError):
        gnormal_expect(np.abs, 0.0, BAND)


def test_derivatives_quadratic():
    s = _solve(lambda x: x * x)
    for t, x in [(0.0, 0.0), (0.3, 1.7), (0.9, -4.2)]:
        u, ux, uxx = derivatives_at(s, t, x)
        assert u == pytest.approx(x * x + 4 * (1 - t), abs=0.05)
        assert ux == pytest.approx(2 * x, abs=0.05)
        assert uxx == pytest.approx(2.0, abs=1e-6)


def test_derivatives_linear():
    s = _solve(lambda x: x)
    u, ux, uxx = derivatives_at(s, 0.4, 2.5)
    assert ux == pytest.approx(1.0, abs=1e-9)
    assert uxx == pytest.approx(0.0, abs=1e-9)


def test_derivatives_even_symmetry():
    s = _solve(lambda x: np.cos(x) + x**2 - 0.1 * x**4, L=20.0)
    for t in (0.0, 0.5):
        assert derivatives_at(s, t, 0.0)[1] == pytest.approx(0.0, abs=1e-9)


def test_derivatives_domain():
    s = _solve(lambda x: x, L=5.0, nx=101)
    with pytest.raises(DomainError):
        derivatives_at(s, 0.0, 5.0)
    with pytest.raises(DomainError):
        derivatives_at(s, 1.5, 0.0)


def test_cfl_violation():
    with pytest.raises(CFLError):
        SolverConfig(cfl_factor=1.5)
    with pytest.raises(CFLError):
        march(np.zeros(11), 0.1, 1.0, BAND, n_steps=10)


def test_non_finite_terminal_rejected():
    # the scheme obeys a maximum principle, so only non-finite data can overflow
    with pytest.raises(GCalcError, match="finite"):
        GridFunction(1.0, np.array([0.0, np.inf, 0.0]))
    with pytest.raises(DomainError):
        march(np.array([0.0, np.nan, 0.0]), 1.0, 0.1, BAND, n_steps=1)


def _random_smooth(rng):
    a = rng.normal(size=4)
    return lambda x: a[0] * np.cos(a[1] * x) + a[2] * np.abs(x) + a[3] * np.tanh(x)


@pytest.mark.parametrize("boundary", ["clamped", "linear"])
def test_comparison_principle(boundary):
    rng = np.random.default_rng(1)
    # linear extrapolation at the edge is not a monotone rule; check its interior half
    inner = slice(None) if boundary == "clamped" else slice(50, 151)
    for _ in range(10):
        f = _random_smooth(rng)
        b = rng.uniform(0, 1, size=2)
        g = lambda x, f=f, b=b: f(x) + b[0] * np.exp(-((x - b[1]) ** 2))
        lo = _solve(f, L=12.0, nx=201, boundary=boundary)
        hi = _solve(g, L=12.0, nx=201, boundary=boundary)
        assert np.all(lo.u[:, inner] <= hi.u[:, inner] + 1e-12)


def test_sublinearity_and_homogeneity():
    rng = np.random.default_rng(2)
    for _ in range(10):
        f, g = _random_smooth(rng), _random_smooth(rng)
        vf, vg = _solve(f, L=12.0, nx=201).value, _solve(g, L=12.0, nx=201).value
        vfg = _solve(lambda x: f(x) + g(x), L=12.0, nx=201).value
        assert vfg <= vf + vg + 1e-10
        lam = rng.uniform(0, 3)
        assert _solve(lambda x: lam * f(x), L=12.0, nx=201).value == pytest.approx(lam * vf, abs=1e-10)


def test_constant_shift_exact():
    f = lambda x: np.abs(x) - 0.2 * x**2
    a = _solve(f, L=12.0, nx=201)
    b = _solve(lambda x: f(x) + 2.5, L=12.0, nx=201)
    np.testing.assert_allclose(b.u, a.u + 2.5, rtol=0, atol=1e-12)


@pytest.mark.parametrize(
    "f",
    [lambda x: np.cos(x) + x**3, np.abs, lambda x: np.clip(x, -1, 2), lambda x: x**4 - 3 * x**2],
    ids=["cos_cubic", "abs", "clamp", "quartic"],
)
def test_degenerate_band_matches_gaussian_quadrature(f):
    band = VolatilityBand(1.5, 1.5)
    # break points at the kinks of abs and clamp; 10 sd covers the Gaussian mass
    want = quad(lambda x: f(x) * norm.pdf(x, scale=1.5), -15, 15, points=[-1.0, 0.0, 2.0], limit=200)[0]
    got = solve_gheat(GridFunction.sample(f, 18.0, 801), 1.0, band, SolverConfig(nx=801, richardson=True)).value
    assert got == pytest.approx(want, abs=2e-3 * max(1.0, abs(want)))


def test_quadratic_is_exact_on_every_grid():
    # D^2 x^2 = 2 exactly, so there is no discretization error to shrink
    for nx in (101, 201, 401):
        assert _solve(lambda x: x * x, nx=nx).value == pytest.approx(4.0, abs=1e-9)


@pytest.mark.parametrize("f, exact", [(lambda x: x**4, 48.0), (np.cosh, math.exp(2.0))], ids=["quartic", "cosh"])
def test_grid_convergence_ratio(f, exact):
    errs = [abs(_solve(f, L=16.0, nx=nx).value - exact) for nx in (201, 401, 801)]
    assert errs[0] / errs[1] >= 3 and errs[1] / errs[2] >= 3


def test_clamped_boundary_keeps_edges():
    g = GridFunction.sample(lambda x: x**2, 5.0, 51)
    s = solve_gheat(g, 0.1, BAND, SolverConfig(boundary="clamped"))
    assert s.u[0, 0] == g.values[0] and s.u[0, -1] == g.values[-1]


def test_slab_csv(tmp_path):
    s = _solve(np.abs, L=5.0, nx=21, max_slices=3)
    s.to_csv(tmp_path / "slab.csv")
    rows = (tmp_path / "slab.csv").read_text().splitlines()
    assert len(rows) == 1 + len(s.times) and rows[0].startswith("t,")


@pytest.mark.parametrize("nx", [2, 4, 400])
def test_grid_rejects_even_counts(nx):
    with pytest.raises(GCalcError):
        SolverConfig(nx=nx)
