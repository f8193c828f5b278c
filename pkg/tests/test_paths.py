import math

import numpy as np
import pytest

from gcalc import CylinderConfig, TimePartition, VolatilityBand, backward_eval, parse_payoff
from gcalc.model import GCalcError
from gcalc.paths import (
    SimParams,
    VolatilityControl,
    capacity_estimate,
    control_family,
    gevaluation,
    hp_norm,
    ito_integral,
    ito_process,
    qv_integral,
    simulate,
    sup_expect,
    surface_feedback,
    terminal_functional,
)
from gcalc.rng import block_draws

BAND = VolatilityBand(1.0, 2.0)
P1 = TimePartition((0.0, 1.0))
SIM = SimParams(n_paths=20_000, n_steps=100, seed=11)
LO, HI = VolatilityControl.constant(1.0, BAND), VolatilityControl.constant(2.0, BAND)


def within(rep_or_value, want, se):
    return abs(rep_or_value - want) <= 3 * se


def test_low_constant_variance():
    b = simulate(LO, 20_000, 100, 1.0, seed=5)
    x = b.B[:, -1] ** 2
    assert within(x.mean(), 1.0, x.std(ddof=1) / math.sqrt(x.size))


def test_qv_is_deterministic_for_constants():
    b = simulate(VolatilityControl.constant(1.3, BAND), 100, 50, 1.0, seed=5)
    np.testing.assert_allclose(b.qv[:, -1], 1.69, rtol=1e-12)
    assert np.all(b.B[:, 0] == 0) and np.all(b.qv[:, 0] == 0)


def test_feedback_for_convex_payoff_is_high_volatility():
    s = backward_eval(parse_payoff("B(1)^2", P1), band=BAND)
    b = simulate(surface_feedback(s), 20_000, 100, 1.0, seed=5)
    x = b.B[:, -1] ** 2
    assert within(x.mean(), 4.0, x.std(ddof=1) / math.sqrt(x.size))
    np.testing.assert_allclose(np.diff(b.qv, axis=1) / b.dt, 4.0)


@pytest.mark.parametrize("law", ["rademacher", "gaussian"])
def test_path_invariants(law):
    for c in control_family(BAND, 1.0):
        b = simulate(c, 500, 64, 1.0, seed=9, increments=law)
        dens = np.diff(b.qv, axis=1) / b.dt
        assert np.all(np.diff(b.qv, axis=1) >= 0)
        assert dens.min() >= 1.0 - 1e-12 and dens.max() <= 4.0 + 1e-12


def test_ito_examples():
    b = simulate(VolatilityControl.schedule((1.0, 2.0), 1.0, BAND), 200, 100, 1.0, seed=1)
    np.testing.assert_allclose(ito_integral(b, 1.0), b.B[:, -1], atol=1e-12)
    half = (b.times[:-1] < 0.5).astype(float)
    np.testing.assert_allclose(ito_integral(b, half), b.B[:, 50], atol=1e-12)
    # <B>_T = B_T^2 - 2 int B dB, exact for +-1 increments
    np.testing.assert_allclose(ito_integral(b, b.B), (b.B[:, -1] ** 2 - b.qv[:, -1]) / 2, atol=1e-10)
    run = ito_process(b, b.B)
    np.testing.assert_allclose(run, (b.B**2 - b.qv) / 2, atol=1e-10)


def test_ito_gaussian_identity_is_order_dt():
    b = simulate(HI, 2000, 500, 1.0, seed=1, increments="gaussian")
    gap = ito_integral(b, b.B) - (b.B[:, -1] ** 2 - b.qv[:, -1]) / 2
    # the gap is -sum (dB^2 - sigma^2 dt)/2, mean zero with sd sigma^2 sqrt(dt/2)
    assert abs(gap.mean()) < 4 * 4 * math.sqrt(b.dt / 2) / math.sqrt(2000)
    assert gap.std() == pytest.approx(4 * math.sqrt(b.dt / 2), rel=0.1)


def test_ito_shape_mismatch():
    b = simulate(LO, 10, 20, 1.0, seed=1)
    with pytest.raises(GCalcError):
        ito_integral(b, np.ones((10, 7)))


def test_qv_integral_examples():
    b = simulate(VolatilityControl.constant(1.5, BAND), 50, 40, 1.0, seed=2)
    np.testing.assert_allclose(qv_integral(b, 1.0), b.qv[:, -1])
    np.testing.assert_allclose(qv_integral(b, 3.0), 3 * b.qv[:, -1])
    eta = b.B[:, :-1]
    np.testing.assert_allclose(qv_integral(b, eta), 2.25 * np.sum(eta * b.dt, axis=1))


def test_sup_expect_examples():
    f2 = lambda b: b.B[:, -1] ** 2
    rep = sup_expect(f2, [LO, HI], SIM)
    assert rep.best_control == HI.id and within(rep.value, 4.0, rep.std_error)
    rep = sup_expect(lambda b: -f2(b), [LO, HI], SIM)
    assert rep.best_control == LO.id and within(rep.value, -1.0, rep.std_error)
    rep = sup_expect(lambda b: b.B[:, -1], control_family(BAND, 1.0), SIM)
    for s in rep.per_control.values():
        assert abs(s["mean"]) <= 3 * s["std_error"]


def test_sup_expect_empty():
    with pytest.raises(GCalcError):
        sup_expect(lambda b: b.B[:, -1], [], SIM)


@pytest.mark.parametrize("n, double_factorial", [(1, 1), (2, 3)])
def test_even_moments(n, double_factorial):
    sim = SimParams(n_paths=40_000, n_steps=200, seed=4)
    s, t = 0.25, 0.75
    f = lambda b: (b.B[:, 150] - b.B[:, 50]) ** (2 * n)
    rep = sup_expect(f, control_family(BAND, 1.0), sim)
    want = 4**n * double_factorial * (t - s) ** n
    assert abs(rep.value - want) <= max(3 * rep.std_error, 0.02 * want)


def test_determinism_across_threads_and_blocks():
    c = VolatilityControl.schedule((2.0, 1.0, 1.0, 2.0), 1.0, BAND)
    a = sup_expect(lambda b: b.B[:, -1] ** 3, [c], SimParams(10_000, 64, seed=3, block_size=1000, threads=1))
    b = sup_expect(lambda b: b.B[:, -1] ** 3, [c], SimParams(10_000, 64, seed=3, block_size=1000, threads=4))
    assert a.to_dict() == b.to_dict()
    x = simulate(c, 3000, 64, 1.0, seed=3, block_size=1000)
    y = simulate(c, 3000, 64, 1.0, seed=3, block_size=1000)
    np.testing.assert_array_equal(x.B, y.B)


def test_draws_are_prefix_consistent():
    a = block_draws(7, "x", 0, 100, 10)
    b = block_draws(7, "x", 0, 40, 10)
    np.testing.assert_array_equal(a[:40], b)
    assert not np.array_equal(block_draws(7, "x", 1, 40, 10), b)
    assert not np.array_equal(block_draws(7, "y", 0, 40, 10), b)


def test_control_validation():
    with pytest.raises(GCalcError):
        VolatilityControl.constant(2.5, BAND)
    with pytest.raises(GCalcError):
        VolatilityControl.schedule((1.0, 3.0), 1.0, BAND)


def test_control_family_size():
    fam = control_family(BAND, 1.0)
    assert len(fam) == 5 + 14
    assert len({c.id for c in fam}) == len(fam)
    assert len(control_family(VolatilityBand(1.5, 1.5), 1.0)) == 1


def test_capacity_examples():
    cs = [LO, VolatilityControl.constant(1.5, BAND), HI]
    rep = capacity_estimate(lambda b: b.B[:, -1] > 0, cs, SIM)
    for s in rep.per_control.values():
        # +-1 steps put mass on B_T = 0 when the step count is even
        assert s["mean"] <= 0.5 + 3 * s["std_error"]
    odd = SimParams(n_paths=20_000, n_steps=101, seed=11)
    rep = capacity_estimate(lambda b: b.B[:, -1] > 0, cs, odd)
    for s in rep.per_control.values():
        assert abs(s["mean"] - 0.5) <= 3 * math.sqrt(0.25 / s["n"])
    rep = capacity_estimate(lambda b: b.qv[:, -1] > (4 - 1e-6), [HI], SIM)
    assert rep.value == 1.0
    rep = capacity_estimate(lambda b: np.ones(b.n_paths, bool), cs, SIM)
    assert rep.value == 1.0 and rep.std_error == 0.0


def test_hp_norm_examples():
    fam = control_family(BAND, 1.0)
    sim = SimParams(n_paths=20_000, n_steps=200, seed=6)
    for p in (1, 2, 3.5):
        assert hp_norm(fam, lambda b: np.ones_like(b.B), p, sim) == pytest.approx(1.0, rel=1e-9)
    assert hp_norm(fam, lambda b: np.zeros_like(b.B), 2, sim) == 0.0
    # E^ int B^2 ds maximized at sigma_max: sigma^2 T^2 / 2 = 2; left sums bias by -dt * 2
    assert hp_norm(fam, lambda b: b.B, 2, sim) == pytest.approx(math.sqrt(2.0), rel=0.01)
    with pytest.raises(GCalcError):
        hp_norm(fam, lambda b: b.B, 0.5, sim)


def test_gevaluation_examples():
    sim = SimParams(n_paths=8192, n_steps=100, seed=2)
    s = backward_eval(parse_payoff("B(1)^2", P1), band=BAND)
    rep = gevaluation(s, control_family(BAND, 1.0, surfaces=[s]), sim)
    assert rep.value >= s.value - 3 * rep.std_error
    c = backward_eval(parse_payoff("2.5", P1), band=BAND, cfg=CylinderConfig())
    rep = gevaluation(c, control_family(BAND, 1.0), sim)
    assert rep.value == pytest.approx(2.5, abs=1e-12)


def test_terminal_functional_on_paths():
    part = TimePartition((0.0, 0.5, 1.0))
    p = parse_payoff("D(1)*D(2)", part)
    b = simulate(HI, 10, 10, 1.0, seed=0)
    np.testing.assert_allclose(terminal_functional(p)(b), (b.B[:, 5]) * (b.B[:, 10] - b.B[:, 5]))


def test_bundle_csv(tmp_path):
    b = simulate(HI, 10, 10, 1.0, seed=0)
    b.to_csv(tmp_path / "b.csv", b.B[:, -1] ** 2)
    rows = (tmp_path / "b.csv").read_text().splitlines()
    assert len(rows) == 11
