import numpy as np
import pytest
import sympy as sp

from conftest import matrix, scalar
from nucontract.errors import TriangularError
from nucontract.spectrum import SweepPlan
from nucontract.sysmodel import CallableMatrix, LinearSystem, MatrixFunction
from nucontract.triangular import (
    KinematicTransform,
    TriangularSystem,
    diagonal_spectra,
    similarity_residual,
    skew_lower,
    triangularize,
)

ROTATION = ["-cos(2*t)", "-sin(2*t) - 1", "1 - sin(2*t)", "cos(2*t)"]


def rotation(t):
    c, s = np.cos(t), np.sin(t)
    return np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)


def test_skew_lower():
    M = np.arange(9.0).reshape(3, 3)
    K = skew_lower(M)
    np.testing.assert_array_equal(K + K.T, 0)
    assert K[2, 0] == M[2, 0] and K[0, 2] == -M[2, 0]


def test_already_triangular_keeps_identity():
    system = matrix(["0", "1", "0", "0"], horizon=20)
    S, U = triangularize(system)
    assert S.kind == "identity"
    t = np.linspace(0, 20, 11)
    np.testing.assert_array_equal(U(t), system.A(t))
    assert similarity_residual(system, S, U, t) == 0.0


def test_scalar_identity(ex1):
    S, U = triangularize(ex1)
    t = np.linspace(0, ex1.horizon, 101)
    np.testing.assert_array_equal(S.S(t), np.ones((101, 1, 1)))
    np.testing.assert_array_equal(U(t), ex1.A(t))


def test_rotation_is_undone():
    # the constructed flow is unstable over long horizons (the stable
    # direction is the initial first column), so the oracle uses T = 8
    system = matrix(ROTATION, horizon=8.0)
    S, U = triangularize(system)
    t = np.linspace(0, 8, 801)
    # integration error grows like exp(2t) along the unstable perturbation
    allowed = 1e-6 + 1e-9 * np.exp(2 * t)
    err_U = np.max(np.abs(U(t) - np.diag([-1.0, 1.0])), axis=(-2, -1))
    err_S = np.max(np.abs(S.S(t) - rotation(t)), axis=(-2, -1))
    assert np.all(err_U <= allowed) and np.all(err_S <= allowed)
    assert similarity_residual(system, S, U, t) <= 1e-7


def test_orthogonality_drift(planar):
    mixed = matrix(["-2", "1", "0.5*sin(t)", "-1 + 0.3*cos(t)"], horizon=60)
    S, U = triangularize(mixed)
    assert U.meta["drift"] <= 1e-8
    t = np.linspace(0, 60, 1201)
    Q = S.S(t)
    err = np.max(np.linalg.norm(np.swapaxes(Q, -1, -2) @ Q - np.eye(2), 2, axis=(-2, -1)))
    assert err <= 1e-8
    assert U.lower_residual <= 1e-10
    assert similarity_residual(mixed, S, U, t) <= 1e-7


def test_example1_kinematic_similarity_oracle(ex1):
    delta, eps1 = 0.5, 2.0
    t_ = sp.Symbol("t", real=True)
    S_expr = sp.exp(eps1 / 2 * t_ * sp.cos(t_) - delta * sp.sin(t_))
    U_expr = sp.simplify(-2 - t_ * sp.sin(t_) - sp.diff(sp.log(S_expr), t_))
    U_fun = sp.lambdify(t_, U_expr, "numpy")
    S = KinematicTransform.from_matrix_function(
        MatrixFunction.from_strings(1, [f"exp({eps1 / 2}*t*cos(t) - {delta}*sin(t))"]),
        ex1.horizon)
    U = CallableMatrix(1, lambda t: np.broadcast_to(U_fun(t), np.shape(t)), (3.0, 0.0))
    grid = np.linspace(0, ex1.horizon, 10_000)
    assert similarity_residual(ex1, S, U, grid) <= 1e-9
    B1 = U(grid)[:, 0, 0] - (-2.0)
    assert np.all(np.abs(B1) <= delta * (1 + eps1 / (2 * delta)))


def test_proposition5_constant_diagonal():
    U = TriangularSystem(matrix(["-2", "0", "0", "3"], horizon=60)).check()
    scalars, full = diagonal_spectra(U, SweepPlan(tol=0.05))
    for s, c in zip(scalars, (-2.0, 3.0)):
        (a, b), = s.intervals
        assert a - 0.05 <= c <= b + 0.05
    assert full.m == 2


def test_proposition5_jordan_like():
    U = TriangularSystem(matrix(["-1", "exp(t/100)", "0", "-1"], horizon=100)).check()
    scalars, full = diagonal_spectra(U, SweepPlan(tol=0.05))
    for s in scalars:
        (a, b), = s.intervals
        assert abs(a + 1) <= 0.1 and abs(b + 1) <= 0.1


def test_proposition5_planar(planar, planar_spectrum):
    _, U = triangularize(planar)
    scalars, _ = diagonal_spectra(U, SweepPlan(tol=0.05), full=planar_spectrum)
    assert [tuple(np.round(s.intervals[0])) for s in scalars] == [(-5.0, -3.0), (-1.0, 1.0)]


def test_inclusion_violation_raises():
    U = TriangularSystem(scalar("-2", 40)).check()
    from nucontract.spectrum import SpectrumResult
    with pytest.raises(TriangularError):
        diagonal_spectra(U, SweepPlan(tol=0.05), full=SpectrumResult([(1.0, 2.0)], [], 0.05))


def test_lower_entries_rejected():
    with pytest.raises(TriangularError):
        TriangularSystem(matrix(["-1", "0", "1", "-1"], horizon=10)).check()


def test_grid_transform_derivative():
    t = np.linspace(0, 10, 2001)
    vals = rotation(t)
    S = KinematicTransform.from_grid(t, vals)
    th = np.linspace(0.3, 9.7, 37)
    dR = np.stack([np.stack([-np.sin(th), -np.cos(th)], -1),
                   np.stack([np.cos(th), -np.sin(th)], -1)], -2)
    np.testing.assert_allclose(S.S_dot(th), dR, atol=1e-7)
    node = t[100:105]
    dR_node = np.stack([np.stack([-np.sin(node), -np.cos(node)], -1),
                        np.stack([np.cos(node), -np.sin(node)], -1)], -2)
    np.testing.assert_allclose(S.S_dot(node), dR_node, atol=1e-10)


def test_near_singular_transform_rejected():
    S = KinematicTransform(1, lambda t: np.full(np.shape(t) + (2, 2), 1.0),
                           lambda t: np.zeros(np.shape(t) + (2, 2)), "grid", 1.0)
    with pytest.raises(TriangularError):
        S.check_bounds(np.linspace(0, 1, 5))


def test_transform_csv(tmp_path):
    S = KinematicTransform.identity(2, 5.0)
    S.write_csv(tmp_path / "s.csv", np.linspace(0, 5, 3))
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0].split(",") == ["t", "S_00", "S_01", "S_10", "S_11"] and len(lines) == 4
