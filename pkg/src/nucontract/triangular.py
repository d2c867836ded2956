"""Kinematic similarity to upper-triangular form by the continuous QR method."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import integrate
from scipy.interpolate import CubicSpline

from .dichotomy import operator_for
from .errors import TriangularError
from .spectrum import SpectrumResult, SweepPlan, compute_spectrum
from .sysmodel import CallableMatrix, LinearSystem, MatrixFunction, _MatrixBase

__all__ = [
    "KinematicTransform",
    "TriangularSystem",
    "triangularize",
    "similarity_residual",
    "diagonal_spectra",
    "skew_lower",
]

DRIFT_TOL = 1e-8
COND_MAX = 1e8


def skew_lower(M: np.ndarray) -> np.ndarray:
    """Strictly lower part minus its transpose."""
    low = np.tril(M, -1)
    return low - np.swapaxes(low, -1, -2)


def _qr_positive(X: np.ndarray):
    q, r = np.linalg.qr(X)
    sg = np.sign(np.diagonal(r, axis1=-2, axis2=-1)).copy()
    sg[sg == 0] = 1.0
    return q * sg[..., None, :], r * sg[..., :, None]


def _rate_knee(times: np.ndarray, logs: np.ndarray) -> float:
    """Smallest rate r >= 0 whose intercept ``max(logs - r t)`` is within 1
    of the best intercept over all rates up to the steepest slope."""
    pos = times > 0
    if not np.any(pos):
        return 0.0
    r_max = max(0.0, float(np.max((logs[pos] - logs[0]) / times[pos])))

    def g(r):
        return float(np.max(logs - r * times))

    target = g(r_max) + 1.0
    if g(0.0) <= target:
        return 0.0
    lo, hi = 0.0, r_max
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if g(mid) <= target:
            hi = mid
        else:
            lo = mid
    return hi


@dataclass(eq=False)
class KinematicTransform:
    """Invertible ``S(t)`` with derivative and growth bound ``M_ups exp(ups t)``.

    ``kind`` is one of ``identity``, ``qr``, ``closed_form`` or ``grid``.
    """

    dim: int
    S: Callable[[np.ndarray], np.ndarray]
    S_dot: Callable[[np.ndarray], np.ndarray]
    kind: str
    horizon: float
    upsilon: float = 0.0
    M_upsilon: float = 1.0
    S_inv: Callable[[np.ndarray], np.ndarray] | None = None

    def inverse(self, t) -> np.ndarray:
        t = np.asarray(t, float)
        if self.S_inv is not None:
            return self.S_inv(t)
        return np.linalg.inv(self.S(t))

    def check_bounds(self, grid=None, *, upsilon: float | None = None) -> "KinematicTransform":
        """Fit or verify ``M_ups`` on ``grid``; raises on near-singular ``S``."""
        grid = np.linspace(0.0, self.horizon, 2001) if grid is None else np.asarray(grid, float)
        S = self.S(grid)
        sv = np.linalg.svd(S, compute_uv=False)
        cond = sv[..., 0] / sv[..., -1]
        bad = np.flatnonzero(~np.isfinite(cond) | (cond > COND_MAX))
        if bad.size:
            k = bad[0]
            raise TriangularError(f"S(t) is near singular (cond={cond[k]:.3g})", t=float(grid[k]))
        logs = np.maximum(np.log(sv[..., 0]), -np.log(sv[..., -1]))
        if upsilon is None:
            upsilon = self.upsilon if self.kind in ("identity", "qr") else _rate_knee(grid, logs)
        self.upsilon = float(upsilon)
        self.M_upsilon = float(max(1.0, np.exp(np.max(logs - self.upsilon * grid))))
        return self

    def bound_margin(self, grid) -> float:
        """``min(ln bound - ln max(|S|, |S^-1|))`` over ``grid`` (>= 0 means it holds)."""
        grid = np.asarray(grid, float)
        sv = np.linalg.svd(self.S(grid), compute_uv=False)
        logs = np.maximum(np.log(sv[..., 0]), -np.log(sv[..., -1]))
        return float(np.min(np.log(self.M_upsilon) + self.upsilon * grid - logs))

    def write_csv(self, path, grid) -> None:
        grid = np.asarray(grid, float)
        vals = self.S(grid).reshape(grid.size, -1)
        n = self.dim
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"S_{r}{c}" for r in range(n) for c in range(n)])
            for t, row in zip(grid, vals):
                w.writerow([repr(float(t))] + [repr(float(x)) for x in row])

    # --------------------------------------------------------- constructors
    @classmethod
    def identity(cls, dim: int, horizon: float) -> "KinematicTransform":
        def S(t):
            t = np.asarray(t, float)
            return np.broadcast_to(np.eye(dim), t.shape + (dim, dim)).copy()

        def S_dot(t):
            t = np.asarray(t, float)
            return np.zeros(t.shape + (dim, dim))

        return cls(dim, S, S_dot, "identity", float(horizon), S_inv=S)

    @classmethod
    def from_matrix_function(cls, S: MatrixFunction, horizon: float,
                             upsilon: float | None = None) -> "KinematicTransform":
        """Closed-form transform; the derivative is symbolic."""
        dS = S.derivative()
        out = cls(S.dim, S, dS, "closed_form", float(horizon))
        return out.check_bounds(upsilon=upsilon)

    @classmethod
    def from_grid(cls, times, values, upsilon: float | None = None) -> "KinematicTransform":
        """Grid-stored transform with cubic interpolation.

        The derivative at interior grid nodes uses fourth-order central
        differences on a uniform grid; elsewhere the spline derivative.
        """
        times = np.asarray(times, float)
        values = np.asarray(values, float)
        n = values.shape[-1]
        spline = CubicSpline(times, values, axis=0)
        h = np.diff(times)
        uniform = times.size >= 5 and np.allclose(h, h[0], rtol=1e-9)
        node_d = spline(times, 1)
        if uniform:
            v = values
            node_d[2:-2] = (-v[4:] + 8 * v[3:-1] - 8 * v[1:-3] + v[:-4]) / (12 * h[0])

        def S_dot(t):
            t = np.asarray(t, float)
            out = spline(t, 1)
            idx = np.searchsorted(times, t)
            idx = np.clip(idx, 0, times.size - 1)
            hit = np.isclose(times[idx], t, rtol=0, atol=1e-12)
            out[hit] = node_d[idx[hit]]
            return out

        out = cls(n, lambda t: spline(np.asarray(t, float)), S_dot, "grid", float(times[-1]))
        return out.check_bounds(times, upsilon=upsilon)


class _QRFlow:
    """Orthogonal factor of ``Phi(t, 0)``, i.e. the solution of
    ``Q' = Q skew(Q^T A Q)`` with ``Q(0) = I``."""

    def __init__(self, op, rtol=1e-11, atol=1e-12):
        self.op, self.A, self.n = op, op.system.A, op.n
        self.rtol, self.atol = rtol, atol
        N, n = op.N, op.n
        Q = np.empty((N + 1, n, n))
        Q[0] = np.eye(n)
        drift = 0.0
        # piecewise steps: a whole segment may be too ill-conditioned for QR
        for k in range(N):
            q = Q[k]
            for piece in op.pieces[k]:
                q, _ = _qr_positive(piece @ q)
            Q[k + 1] = q
            drift = max(drift, float(np.linalg.norm(q.T @ q - np.eye(n), 2)))
        if drift > DRIFT_TOL:
            raise TriangularError(f"orthogonality drift {drift:.3g} after re-orthonormalisation")
        self.grid_Q = Q
        self.drift = drift

    def rhs_matrix(self, t, Q):
        M = np.swapaxes(Q, -1, -2) @ self.A(t) @ Q
        return Q @ skew_lower(M)

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, float)
        flat = t.ravel()
        op, n = self.op, self.n
        ks = np.array([op._index(float(x))[0] for x in flat], dtype=int)
        starts = op.grid[ks]
        lengths = flat - starts
        out = self.grid_Q[ks].copy()
        move = np.flatnonzero(lengths > 0)
        if move.size:
            m = move.size
            s0, ln = starts[move], lengths[move]

            def rhs(tau, y):
                X = y.reshape(m, n, n)
                return (self.rhs_matrix(s0 + tau * ln, X) * ln[:, None, None]).reshape(-1)

            sol = integrate.solve_ivp(rhs, (0.0, 1.0), out[move].reshape(-1), method="RK45",
                                      rtol=self.rtol, atol=self.atol)
            if not sol.success:
                raise TriangularError(f"QR flow integration failed: {sol.message}")
            Y = sol.y[:, -1].reshape(m, n, n)
            drift = np.linalg.norm(np.swapaxes(Y, -1, -2) @ Y - np.eye(n), 2, axis=(-2, -1))
            Y, _ = _qr_positive(Y)
            self.drift = max(self.drift, float(np.max(drift)))
            out[move] = Y
        return out.reshape(t.shape + (n, n))

    def derivative(self, t) -> np.ndarray:
        t = np.asarray(t, float)
        return self.rhs_matrix(t, self(t))

    def triangular(self, t) -> np.ndarray:
        """``U = Q^T A Q - Q^T Q'``: upper triangle of ``M`` plus its mirrored lower part."""
        t = np.asarray(t, float)
        Q = self(t)
        M = np.swapaxes(Q, -1, -2) @ self.A(t) @ Q
        return np.triu(M) + np.swapaxes(np.tril(M, -1), -1, -2)


@dataclass(eq=False)
class TriangularSystem:
    """Upper-triangular ``D(t)`` with envelope ``|D(t)| <= N exp(sigma t)``."""

    system: LinearSystem
    growth: tuple = (1.0, 0.0)
    lower_residual: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def D(self) -> _MatrixBase:
        return self.system.A

    @property
    def dim(self) -> int:
        return self.system.dim

    @property
    def horizon(self) -> float:
        return self.system.horizon

    def __call__(self, t) -> np.ndarray:
        return self.D(t)

    def diagonal(self, r: int) -> LinearSystem:
        """The scalar system ``x' = d_rr(t) x``."""
        D = self.D
        if isinstance(D, MatrixFunction):
            A = D.diagonal_entry(r)
        else:
            A = CallableMatrix(1, lambda t, r=r: D(t)[..., r, r], D.envelope,
                               f"diagonal {r} of {getattr(D, 'description', 'D')}")
        return LinearSystem(A, self.horizon, label=f"{self.system.label}[d{r}{r}]")

    def check(self, grid=None) -> "TriangularSystem":
        """Strict-lower residual and growth envelope on ``grid``."""
        grid = np.linspace(0.0, self.horizon, 2001) if grid is None else np.asarray(grid, float)
        vals = self.D(grid)
        low = float(np.max(np.abs(np.tril(vals, -1)))) if self.dim > 1 else 0.0
        if low > 1e-10:
            raise TriangularError(f"strictly lower entries up to {low:.3g}")
        mu = float(self.D.envelope[1])
        norms = np.linalg.norm(vals, 2, axis=(-2, -1))
        self.growth = (float(max(np.max(norms * np.exp(-mu * grid)), 1e-300)), mu)
        self.lower_residual = low
        return self


def triangularize(system: LinearSystem, *, check_grid=None):
    """Return ``(S, U)`` with ``U = S^-1 A S - S^-1 S'`` upper triangular.

    Structurally upper-triangular input keeps ``S = I`` and ``U = A``.
    """
    n, T = system.dim, system.horizon
    if n == 1 or system.A.is_upper_triangular():
        S = KinematicTransform.identity(n, T)
        U = TriangularSystem(system, meta={"method": "identity"}).check(check_grid)
        return S, U
    op = operator_for(system)
    flow = _QRFlow(op)

    def S_inv(t):
        return np.swapaxes(flow(t), -1, -2)

    S = KinematicTransform(n, flow, flow.derivative, "qr", T, 0.0, 1.0, S_inv=S_inv)
    M, mu = system.A.envelope
    # |U| <= |triu M| + |tril M| <= 2 |M| with |M| = |A|
    D = CallableMatrix(n, flow.triangular, (2.0 * M, mu), f"QR form of {system.label or 'A'}")
    U = TriangularSystem(LinearSystem(D, T, label=f"{system.label}[QR]"),
                         meta={"method": "qr", "drift": flow.drift})
    U.check(check_grid)
    U.meta["drift"] = flow.drift
    return S, U


def similarity_residual(A, S: KinematicTransform, U, grid) -> float:
    """``max_t |U(t) - (S^-1 A S - S^-1 S')(t)|`` over ``grid``."""
    grid = np.asarray(grid, float)
    fA = A.A if isinstance(A, LinearSystem) else A
    fU = U.D if isinstance(U, TriangularSystem) else (U.A if isinstance(U, LinearSystem) else U)
    Sv = S.S(grid)
    if Sv.shape[-1] != fA.dim or fU.dim != fA.dim:
        raise TriangularError("incompatible dimensions")
    sv = np.linalg.svd(Sv, compute_uv=False)
    cond = sv[..., 0] / sv[..., -1]
    bad = np.flatnonzero(~np.isfinite(cond) | (cond > 1e14))
    if bad.size:
        raise TriangularError("S(t) is singular", t=float(grid[bad[0]]))
    Sinv = S.inverse(grid)
    target = Sinv @ fA(grid) @ Sv - Sinv @ S.S_dot(grid)
    diff = fU(grid) - target
    return float(np.max(np.linalg.norm(diff, 2, axis=(-2, -1))))


def diagonal_spectra(U: TriangularSystem, plan: SweepPlan | None = None, *,
                     full: SpectrumResult | None = None, check: bool = True):
    """Spectra of the diagonal entries, checked for inclusion in ``Sigma(U)``.

    Returns ``(scalar_spectra, full)``.  An inclusion miss beyond three
    tolerances raises :class:`TriangularError`.
    """
    plan = plan or SweepPlan()
    scalars = [compute_spectrum(U.diagonal(r), plan) for r in range(U.dim)]
    if not check:
        return scalars, full
    if full is None:
        full = scalars[0] if U.dim == 1 else compute_spectrum(U.system, plan)
    slack = 3.0 * max(full.tolerance, plan.tol)
    for r, s in enumerate(scalars):
        for a, b in s.intervals:
            if not any(a >= lo - slack and b <= hi + slack for lo, hi in full.intervals):
                raise TriangularError(
                    f"diagonal {r} spectrum [{a:.4g}, {b:.4g}] is not inside "
                    f"{[(round(x, 4), round(y, 4)) for x, y in full.intervals]}")
    return scalars, full
