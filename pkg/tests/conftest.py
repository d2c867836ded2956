"""Shared fixtures: expensive spectra and contractions are computed once."""

import numpy as np
import pytest

from nucontract import builtin_example, parse_system
from nucontract.contraction import certify, contract_system
from nucontract.spectrum import SweepPlan, compute_spectrum


def scalar(text, horizon=100.0):
    return parse_system(f'dim = 1\nhorizon = {horizon}\nentries = ["{text}"]\n')


def matrix(texts, horizon=100.0, envelope=None):
    rows = ", ".join(f'"{t}"' for t in texts)
    dim = int(round(len(texts) ** 0.5))
    env = f"\n[envelope]\nM = {envelope[0]}\nmu = {envelope[1]}\n" if envelope else "\n"
    return parse_system(f"dim = {dim}\nhorizon = {horizon}\nentries = [{rows}]{env}")


@pytest.fixture(scope="session")
def ex1():
    return builtin_example("example1", lambda0=-2.0, a=-1.0)


@pytest.fixture(scope="session")
def ex2():
    return builtin_example("example2", lambda1=1.0)


@pytest.fixture(scope="session")
def planar():
    return builtin_example("planar", lambda0=-4.0, a=-1.0, lambda1=1.0)


@pytest.fixture(scope="session")
def plan():
    return SweepPlan(tol=0.05)


@pytest.fixture(scope="session")
def ex1_spectrum(ex1, plan):
    return compute_spectrum(ex1, plan)


@pytest.fixture(scope="session")
def ex2_spectrum(ex2, plan):
    return compute_spectrum(ex2, plan)


@pytest.fixture(scope="session")
def planar_spectrum(planar, plan):
    return compute_spectrum(planar, plan)


@pytest.fixture(scope="session")
def ex1_contraction(ex1, ex1_spectrum):
    out = contract_system(ex1, 0.5, spectrum=ex1_spectrum)
    return out, certify(out)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def lyapunov_transformed(system, rng, amplitude=0.3):
    """``S^-1 A S - S^-1 S'`` for a random bounded ``S(t) = S0 + amp sin(w t) S1``."""
    from nucontract.sysmodel import CallableMatrix, LinearSystem

    n = system.dim
    q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    S0 = q @ np.diag(rng.uniform(1.0, 2.0, n))
    S1 = rng.normal(size=(n, n))
    S1 *= amplitude * np.min(np.linalg.svd(S0, compute_uv=False)) / np.linalg.norm(S1, 2)
    w = rng.uniform(0.5, 1.5)

    def U(t):
        t = np.asarray(t, float)
        S = S0 + np.sin(w * t)[..., None, None] * S1
        Sd = (w * np.cos(w * t))[..., None, None] * S1
        Si = np.linalg.inv(S)
        return Si @ system.A(t) @ S - Si @ Sd

    grid = np.linspace(0.0, system.horizon, 20001)
    peak = float(np.max(np.linalg.norm(U(grid), 2, axis=(-2, -1))))
    A = CallableMatrix(n, U, (1.1 * peak, 0.0), "Lyapunov transform")
    return LinearSystem(A, system.horizon, label=f"{system.label}~")


ACCEPTANCE = {}


def record(criterion, passed, detail):
    """Store one acceptance verdict for the terminal summary and echo it."""
    line = f"criterion {criterion}: {'PASS' if passed else 'FAIL'} - {detail}"
    ACCEPTANCE[criterion] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
