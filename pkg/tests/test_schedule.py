import math

import numpy as np
import pytest
from scipy import integrate, optimize

from conftest import scalar
from nucontract.contraction import build_L
from nucontract.errors import ContractionError
from nucontract.schedule import (
    CrossingSchedule,
    CumulativeIntegral,
    PiecewiseLinear,
    ScalarDichotomyConstants,
    ScheduleConstants,
    build_crossing_schedule,
    check_conditions,
    scalar_dichotomy_constants,
    select_constants,
    smooth_schedule,
)


def sdc_zero(M=0.5, **kw):
    base = dict(beta=1.0, alpha=0.5, eps=0.0, K=1.0, a_bar=0.0, eps_bar=0.0,
                interval=(0.0, 0.0), M_delta=M)
    base.update(kw)
    return ScalarDichotomyConstants(**base)


def consts(N=0.25, p=1.0, xi=0.2, xi_bar=-0.1):
    return ScheduleConstants(N, xi, p, xi_bar, -p, -0.5, -1.0)


@pytest.fixture(scope="module")
def sin_sdc():
    return scalar_dichotomy_constants(scalar("sin(t)", 200), (0.0, 0.0), 0.5)


def test_cumulative_integral_against_quad():
    F = CumulativeIntegral(lambda t: np.sin(t) * t, 50.0)
    for t in (0.0, 0.37, 13.2, 50.0):
        ref, _ = integrate.quad(lambda x: math.sin(x) * x, 0, t, limit=200)
        assert abs(float(F(np.array([t]))[0]) - ref) < 1e-10


def test_zero_channel_constants():
    s = scalar_dichotomy_constants(scalar("0", 200), (0.0, 0.0), 0.5)
    assert s.alpha == pytest.approx(0.5, abs=0.05)
    assert s.eps <= 0.05 and s.log_beta <= 0.1 and not s.refit


def test_sin_channel_constants(sin_sdc):
    assert sin_sdc.alpha == pytest.approx(0.5, abs=0.05) and sin_sdc.eps <= 0.05
    # |int sin| <= 2, so beta = e^2 up to the rate traded for ln beta
    assert sin_sdc.log_beta <= 2.0 + (sin_sdc.alpha - 0.5) * 200 + 0.1


def test_example1_channel_is_nonuniform(ex1):
    s = scalar_dichotomy_constants(ex1, (-3.0, -1.0), 0.25)
    assert s.eps > 0
    assert set(s.sides) == {"stable", "unstable"} or len(s.sides) == 2


def test_select_constants_policy():
    c = select_constants(sdc_zero(alpha=1.0, a_bar=1.0))
    assert c.N == pytest.approx(0.5)
    assert c.p == pytest.approx(1.0) and c.p_bar == pytest.approx(-1.0)
    assert c.xi == pytest.approx(0.2) and c.xi_bar == pytest.approx(-0.1)
    assert check_conditions(c, sdc_zero(alpha=1.0, a_bar=1.0), (0.0, 0.0), 0.5) == []


def test_select_constants_rejects_eps_equal_alpha():
    with pytest.raises(ContractionError):
        select_constants(sdc_zero(alpha=0.5, eps=0.5))


def test_sin_constants_feasible(sin_sdc):
    c = select_constants(sin_sdc)
    assert check_conditions(c, sin_sdc, sin_sdc.interval, sin_sdc.M_delta) == []


def test_linear_crossing_at_four():
    sched = build_crossing_schedule(scalar("0", 200), sdc_zero(), consts())
    assert sched.times[1] == pytest.approx(4.0, abs=1e-9)


def test_sin_crossing_matches_root_finder():
    sched = build_crossing_schedule(scalar("sin(t)", 200), sdc_zero(), consts())
    f = lambda t: (1 - math.cos(t)) + 0.5 * t - (0.25 * t + 1)  # noqa: E731
    # the equation reduces to cos t = t/4, whose only root is near 1.2524
    root = optimize.bisect(f, 0.0, 2.0, xtol=1e-12)
    assert sched.times[1] == pytest.approx(root, abs=1e-9)


def test_even_crossing_and_N_bar():
    sched = build_crossing_schedule(scalar("0", 200), sdc_zero(), consts())
    T1, T2 = sched.times[1], sched.times[2]
    # Psi(w, T1) = -(b + M)(w - T1) meets -N T1 - xi T1 - p
    target = -0.25 * T1 - 0.2 * T1 - 1.0
    assert -0.5 * (T2 - T1) == pytest.approx(target, abs=1e-8)
    nb = sched.N_bars[0]
    assert nb <= 0 and nb == pytest.approx((target - (-0.1 * T1 - 1.0)) / (T2 - T1))


@pytest.mark.parametrize("text", ["0", "sin(t)"])
def test_gap_lower_bounds(text):
    d = scalar(text, 200)
    sdc = scalar_dichotomy_constants(d, (0.0, 0.0), 0.5)
    sched = build_crossing_schedule(d, sdc, select_constants(sdc))
    assert sched.crossings.size >= 2
    assert sched.gap_violations() == []
    odd, even = sched.gap_bounds()
    assert odd > 0 and all(e > 0 for e in even)


def manual_schedule(times, interval=(-1.0, 1.0), M=0.0, partial=True):
    T = times[-1]
    sdc = sdc_zero(M=M, interval=interval)
    return CrossingSchedule(interval, M, consts(), sdc, np.asarray(times, float), [], T,
                            partial, integral=CumulativeIntegral(lambda t: 0 * t, T))


def test_smoothing_without_jumps():
    sched = manual_schedule([0.0, 10.0])
    sm = smooth_schedule(sched)
    t = np.linspace(0, 10, 101)
    np.testing.assert_array_equal(sm.c_bar(t), sched.c(t))
    assert sm.discrepancy == 0.0


def test_smoothing_single_jump_triangle():
    sched = manual_schedule([0.0, 0.4, 0.8])
    sm = smooth_schedule(sched)
    assert sm.widths.tolist() == pytest.approx([0.1])
    assert sm.discrepancy == pytest.approx(0.1)
    area, _ = integrate.quad(lambda x: abs(float(sched.c(x)) - float(sm.c_bar(x))), 0, 0.8,
                             points=[0.3, 0.4, 0.5], limit=200)
    assert area == pytest.approx(0.1, abs=1e-9)


@pytest.mark.parametrize("text", ["0", "sin(t)"])
def test_smoothing_discrepancy_by_quadrature(text):
    d = scalar(text, 200)
    sdc = scalar_dichotomy_constants(d, (0.0, 0.0), 0.5)
    sched = build_crossing_schedule(d, sdc, select_constants(sdc))
    sm = smooth_schedule(sched)
    total = sm.total
    pts = sorted(set(sm.c_bar.x.tolist()))
    area = 0.0
    for lo, hi in zip(pts, pts[1:]):
        f = lambda x: abs(float(sched.c(x) + sched.lam(x)) - float(total(x)))  # noqa: E731
        mid = 0.5 * (lo + hi)
        area += integrate.quad(f, lo, hi, points=[mid], limit=100)[0]
    assert area <= 1.0
    assert area == pytest.approx(sm.discrepancy, abs=1e-6)
    a, b = sched.interval
    t = np.linspace(0, 200, 20001)
    assert np.all((sm.c_bar(t) >= a - 1e-12) & (sm.c_bar(t) <= b + 1e-12))
    assert np.all(np.abs(sm.lam_bar(t)) <= sched.M_delta + 1e-12)


def test_piecewise_linear_integral():
    f = PiecewiseLinear([0, 1, 3], [0, 2, -2])
    for t in (0.5, 1.0, 2.2, 3.0):
        ref, _ = integrate.quad(f, 0, t, points=[1.0])
        assert float(f.integral(np.array([t]))[0]) == pytest.approx(ref, abs=1e-12)


def test_build_L_identity_when_tracking():
    # with d equal to the smoothed target the integrand vanishes
    sched = manual_schedule([0.0, 10.0], interval=(-1.0, -1.0), M=0.0)
    sched.integral = CumulativeIntegral(lambda t: -1.0 + 0 * t, 10.0)
    L = build_L([smooth_schedule(sched)])
    np.testing.assert_allclose(L.S(np.linspace(0, 10, 11)), np.ones((11, 1, 1)), atol=1e-12)


def test_build_L_envelope_on_fresh_points(sin_sdc, rng):
    d = scalar("sin(t)", 200)
    sched = build_crossing_schedule(d, sin_sdc, select_constants(sin_sdc))
    L = build_L([smooth_schedule(sched)])
    t = np.sort(rng.uniform(0, 200, 1000))
    mu = L.S(t)[:, 0, 0]
    bound = L.M_upsilon * np.exp(L.upsilon * t)
    assert np.all(mu <= bound) and np.all(1 / mu <= bound)
    # the transform's derivative agrees with finite differences of mu
    h = 1e-6
    fd = (L.S(t + h) - L.S(t - h))[:, 0, 0] / (2 * h)
    np.testing.assert_allclose(L.S_dot(t)[:, 0, 0], fd, rtol=1e-5, atol=1e-8)
