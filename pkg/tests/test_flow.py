import math

import numpy as np
import pytest
from scipy import integrate

from conftest import matrix, scalar
from nucontract.dichotomy import operator_for
from nucontract.flow import TransitionOperator, fit_growth, scalar_log_transition, transition


def ex1_log_phi(t, s, l0=-2.0, a=-1.0):
    F = lambda x: l0 * x + a * (np.sin(x) - x * np.cos(x))  # noqa: E731
    return F(t) - F(s)


def test_identity_on_diagonal(ex1, planar):
    for system in (ex1, planar):
        op = operator_for(system)
        np.testing.assert_allclose(transition(op, 5.0, 5.0), np.eye(system.dim), atol=1e-14)
        np.testing.assert_allclose(transition(op, 3.3, 3.3), np.eye(system.dim), atol=1e-14)


def test_constant_decay():
    op = TransitionOperator(scalar("-1", 10))
    np.testing.assert_allclose(transition(op, 3.0, 1.0), [[math.exp(-2)]], rtol=1e-9)
    np.testing.assert_allclose(transition(op, 1.0, 3.0), [[math.exp(2)]], rtol=1e-9)


def test_example1_closed_form(ex1, rng):
    op = operator_for(ex1)
    for t, s in rng.uniform(0, ex1.horizon, size=(60, 2)):
        got = op.log_norm(t, s)
        assert abs(got - ex1_log_phi(t, s)) <= 1e-7 * max(1.0, abs(ex1_log_phi(t, s)))


def test_example1_closed_form_by_quadrature():
    # the antiderivative itself checked by an independent quadrature
    val, _ = integrate.quad(lambda x: -2 - x * math.sin(x), 1.5, 17.25, limit=200)
    assert abs(val - ex1_log_phi(17.25, 1.5)) < 1e-9


def test_cocycle_relative_error(planar, rng):
    op = operator_for(planar)
    worst = 0.0
    for t, s, tau in rng.uniform(0, planar.horizon, size=(200, 3)):
        lhs = op.log_transition(t, tau)
        p1, p2 = op.log_transition(t, s), op.log_transition(s, tau)
        # products compared in a common scale: (unit matrix, log scale)
        full = lhs[1] * np.exp(lhs[0] - lhs[0])
        prod = (p1[1] @ p2[1]) * np.exp(p1[0] + p2[0] - lhs[0])
        err = np.linalg.norm(full - prod, 2) / np.linalg.norm(full, 2)
        worst = max(worst, err)
    assert worst <= 1e-8


def test_stored_inverses(ex1, planar):
    assert np.max(operator_for(ex1).inverse_residual) <= 1e-10
    # Phi(t_k, 0) of the planar system has condition number beyond double range
    assert operator_for(planar).segment_inverse_residual <= 1e-10


def test_checkpoint_table(ex1):
    op = operator_for(ex1)
    tab = op.checkpoint_table()
    assert tab.shape[1] == 3 and tab[0, 0] == 0.0
    np.testing.assert_allclose(tab[:, 1], ex1_log_phi(tab[:, 0], 0.0), atol=1e-6)


@pytest.mark.parametrize("text,t,s,expected", [
    ("0", 7.0, 2.0, 0.0),
    ("sin(t)", math.pi, 0.0, 2.0),
    ("sin(ln(t+1)) + cos(ln(t+1))", math.e - 1, 0.0, math.e * math.sin(1.0)),
])
def test_scalar_log_transition(text, t, s, expected):
    assert abs(scalar_log_transition(scalar(text, 20), t, s) - expected) < 1e-10


def test_growth_constant_diagonal():
    g = fit_growth(TransitionOperator(matrix(["-1", "0", "0", "2"], horizon=30)))
    assert abs(g.a - 2.0) <= 0.05
    assert g.eps_bar <= 0.05 and g.K0 <= 1.2
    assert g.residual <= 0


def test_growth_zero_system():
    g = fit_growth(TransitionOperator(scalar("0", 20)))
    assert g.K0 == pytest.approx(1.0, abs=1e-6)
    assert g.a == pytest.approx(0.0, abs=1e-6) and g.eps_bar == pytest.approx(0.0, abs=1e-6)


def test_growth_example1_nonuniform(ex1):
    g = fit_growth(operator_for(ex1))
    assert g.eps_bar > 0 and g.K0 >= 1 and g.residual <= 0
