import math

import numpy as np
import pytest

from conftest import matrix, scalar
from nucontract.contraction import ContractionParams, certify, contract_system, find_blocks
from nucontract.errors import ContractionError
from nucontract.spectrum import SweepPlan


def test_params():
    p = ContractionParams.from_delta(0.5, 2)
    assert p.M_delta == 0.25 and p.K_delta == 4.0
    assert ContractionParams.from_delta(4.0, 1).K_delta == 1.0
    with pytest.raises(ContractionError):
        ContractionParams.from_delta(0.0, 1)


def test_find_blocks(planar):
    assert find_blocks(planar.A) == [(0,), (1,)]
    assert find_blocks(matrix(["-1", "1", "0", "-1"], 10).A) == [(0, 1)]


@pytest.fixture(scope="module")
def constant():
    out = contract_system(scalar("-2", 100), 0.1, sweep=SweepPlan(tol=0.05))
    return out, certify(out)


def test_constant_system(constant):
    out, cert = constant
    t = np.linspace(0, 100, 2001)
    # C alternates between the ends of the degenerate interval of width 2 tol
    assert np.all(np.abs(out.C(t)[:, 0, 0] + 2) <= 2 * out.spectrum.tolerance + 1e-12)
    assert np.max(np.abs(out.B(t))) <= 0.1 * out.K_delta_eps
    assert cert.passed
    assert all(c.margin >= 0 for c in cert.clauses)


def test_example1_certificate(ex1_contraction):
    out, cert = ex1_contraction
    assert cert.passed, [c.as_dict() for c in cert.clauses if not c.passed]
    t = np.linspace(0, out.horizon, 20001)
    C = out.C(t)[:, 0, 0]
    assert np.all((C >= -3 - 0.15) & (C <= -1 + 0.15))
    assert np.max(np.abs(out.B(t))) <= 0.5 * out.K_delta_eps
    assert cert.checks["gap_violations"] == []
    assert cert.checks["smoothing_discrepancy"] <= 1.0
    assert cert.window == (0.0, out.horizon) and math.isfinite(cert.window[1])


def test_example1_schedule_alternates(ex1_contraction):
    out, _ = ex1_contraction
    sched = out.blocks[0].channels[0].schedule
    assert np.all(np.diff(sched.times) > 0)
    t = np.linspace(0, out.horizon, 4001)
    assert set(np.round(np.unique(sched.c(t)), 6)) <= set(np.round(sched.interval, 6))


def test_negative_control(ex1_contraction, constant):
    for out, _ in (ex1_contraction, constant):
        bad = certify(out.corrupted(10.0))
        clause = bad.clause("B_small")
        assert not clause.passed and clause.worst_t is not None
        assert not bad.passed


def test_certificate_json_shape(ex1_contraction):
    _, cert = ex1_contraction
    d = cert.as_dict()
    assert [c["name"] for c in d["clauses"]] == [
        "C_in_spectrum", "B_small", "transform_bounds", "similarity_residual"]
    assert d["certified_window"][1] == 200.0


@pytest.mark.slow
def test_triangular_toy_step4_bound():
    system = matrix(["-1", "exp(0.01*t)", "0", "-1"], horizon=100)
    out = contract_system(system, 0.5, sweep=SweepPlan(tol=0.05))
    blk, = out.blocks
    assert blk.n == 2
    M, K = out.params.M_delta, out.params.K_delta
    bound = M * (1 + blk.n * blk.kappa * K) + blk.K1 * blk.K2 * blk.eta / (1 - blk.eta)
    t = np.linspace(0, 100, 4001)
    norms = np.linalg.norm(blk.B(t), 2, axis=(-2, -1))
    assert np.all(norms <= bound)
    assert certify(out).passed


@pytest.mark.slow
def test_planar_contraction(planar, planar_spectrum):
    out = contract_system(planar, 0.5, spectrum=planar_spectrum)
    cert = certify(out)
    assert cert.passed
    t = np.linspace(0, out.horizon, 4001)
    C = np.diagonal(out.C(t), axis1=-2, axis2=-1)
    assert np.all(planar_spectrum.distance(C[:, 0]) <= planar_spectrum.tolerance)
    assert np.all(planar_spectrum.distance(C[:, 1]) <= planar_spectrum.tolerance)
    assert np.all(C[:, 0] < -2) and np.all(C[:, 1] > -2)


@pytest.mark.slow
def test_example2_contraction(ex2, ex2_spectrum):
    out = contract_system(ex2, 0.25, spectrum=ex2_spectrum)
    assert certify(out).passed
    t = np.linspace(0, out.horizon, 4001)
    C = out.C(t)[:, 0, 0]
    closed_form = np.sin(np.log(t + 1))
    # both the computed and the closed-form diagonal stay in [-1, 1]
    tol = ex2_spectrum.tolerance
    assert np.all(np.abs(C) <= 1 + 0.15 + tol) and np.all(np.abs(closed_form) <= 1)
