import numpy as np
import pytest

from conftest import scalar
from nucontract.dichotomy import operator_for
from nucontract.flow import GrowthEstimate, fit_growth
from nucontract.spectrum import (
    SpectrumResult,
    SweepPlan,
    bracket,
    compute_spectrum,
    union_block_spectrum,
)

TOL = 0.15


def close_to(intervals, reference, tol=TOL):
    return len(intervals) == len(reference) and all(
        abs(a - ra) <= tol and abs(b - rb) <= tol
        for (a, b), (ra, rb) in zip(intervals, reference))


def g(K0, a, eps):
    return GrowthEstimate(K0, a, eps, 0.0, 1, 10.0)


def test_bracket_formula(ex1):
    assert bracket(g(1, 0, 0)) == (-1, 1)
    assert bracket(g(1, 2, 0)) == (-3, 3)
    lo, hi = bracket(fit_growth(operator_for(ex1)))
    assert lo < -3 and hi > -1


def test_constant_is_degenerate():
    spec = compute_spectrum(scalar("-2", 100), SweepPlan(tol=0.05))
    assert spec.m == 1
    a, b = spec.intervals[0]
    assert b - a <= 2 * 0.05 + 1e-12 and a <= -2 <= b
    assert "degenerate" in spec.interval_flags[0]


def test_example1(ex1_spectrum):
    assert close_to(ex1_spectrum.intervals, [(-3, -1)])
    ex1_spectrum.check_structure(1)


def test_example2(ex2_spectrum):
    assert close_to(ex2_spectrum.intervals, [(-1, 1)])


def test_planar(planar_spectrum):
    assert close_to(planar_spectrum.intervals, [(-5, -3), (-1, 1)])
    planar_spectrum.check_structure(2)


def test_planar_is_union_of_scalars(planar, planar_spectrum, ex2_spectrum, plan):
    from nucontract import builtin_example
    s1 = compute_spectrum(builtin_example("example1", lambda0=-4.0, a=-1.0), plan)
    u = union_block_spectrum(s1, ex2_spectrum)
    assert close_to(planar_spectrum.intervals, u.intervals, 2 * plan.tol)


def test_union_disjoint_and_touching():
    s1 = SpectrumResult([(-2.0, -2.0)], [], 0.05)
    s2 = SpectrumResult([(3.0, 3.0)], [], 0.05)
    assert union_block_spectrum(s1, s2).intervals == [(-2.0, -2.0), (3.0, 3.0)]
    s3 = SpectrumResult([(-3.0, -1.0)], [], 0.05)
    s4 = SpectrumResult([(-1.0, 1.0)], [], 0.05)
    assert union_block_spectrum(s3, s4).intervals == [(-3.0, 1.0)]


@pytest.mark.parametrize("name,dim", [("ex1_spectrum", 1), ("ex2_spectrum", 1),
                                      ("planar_spectrum", 2)])
def test_rank_staircase_monotone(name, dim, request):
    spec = request.getfixturevalue(name)
    admitted = [(lam, v.projector_rank) for lam, v in sorted(spec.samples, key=lambda x: x[0])
                if v.admits]
    ranks = [r for _, r in admitted]
    assert ranks == sorted(ranks)
    # below the spectrum nothing is stable, above it everything is
    assert ranks[0] == 0 and ranks[-1] == dim
    assert len(set(ranks)) == spec.m + 1


def test_resolvent_samples_outside(planar_spectrum):
    for lam, _ in planar_spectrum.resolvent_samples():
        assert planar_spectrum.distance(lam) > 0


def test_enclosures_bracket_endpoints(ex1_spectrum):
    (r_lo, s_lo), (s_hi, r_hi) = ex1_spectrum.enclosures[0]
    assert r_lo < s_lo <= s_hi < r_hi
    assert s_lo - r_lo <= 2 * ex1_spectrum.tolerance


def test_parallel_sweep_matches_serial(ex2):
    short = ex2.with_horizon(60.0)
    a = compute_spectrum(short, SweepPlan(tol=0.1))
    b = compute_spectrum(short, SweepPlan(tol=0.1, n_jobs=4))
    assert a.intervals == b.intervals


TWO_CHANNEL = ["-3 + 0.5*(sin(ln(t+1)) + cos(ln(t+1)))", "0", "0",
               "sin(ln(t+1)) + cos(ln(t+1))"]


@pytest.mark.slow
def test_invariance_under_lyapunov_transform(plan, rng):
    from conftest import lyapunov_transformed, matrix
    base = matrix(TWO_CHANNEL, horizon=200.0)
    ref = compute_spectrum(base, plan)
    assert ref.m == 2
    moved = compute_spectrum(lyapunov_transformed(base, rng), plan)
    assert close_to(moved.intervals, ref.intervals, 2 * plan.tol)
