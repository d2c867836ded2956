"""Transition operator ``Phi(t, s)`` with checkpoints and growth fits.

The horizon is cut into segments of length ``step``.  All segment
propagators ``G_k = Phi(t_{k+1}, t_k)`` are integrated in a single
vectorised Dormand-Prince 5(4) solve, each segment running in its own
rescaled local time.  Fundamental matrices ``Phi(t_k, 0)`` and their
inverses are stored as ``exp(scale) * unit`` so that long horizons do not
overflow.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate

from .envelope import EnvelopePoints, fit_growth_rate, prune
from .errors import ConditioningError, FitError, IntegrationError
from .sysmodel import LinearSystem
from .validation import check_times

__all__ = [
    "TransitionOperator",
    "GrowthEstimate",
    "transition",
    "scalar_log_transition",
    "fit_growth",
    "chain_products",
    "spectral_lognorm",
]

INVERSE_RESIDUAL_MAX = 1e-10
GROWTH_BUDGET = 1.0


def spectral_lognorm(mats: np.ndarray) -> np.ndarray:
    """``ln`` of the spectral norm over the last two axes."""
    if mats.shape[-1] == 1:
        with np.errstate(divide="ignore"):
            return np.log(np.abs(mats[..., 0, 0]))
    with np.errstate(divide="ignore"):
        return np.log(np.linalg.norm(mats, ord=2, axis=(-2, -1)))


def _normalise(mats: np.ndarray):
    nrm = np.sqrt(np.sum(mats * mats, axis=(-2, -1)))
    nrm = np.where(nrm > 0, nrm, 1.0)
    return mats / nrm[..., None, None], np.log(nrm)


def chain_products(steps: np.ndarray, inv_steps: np.ndarray | None = None):
    """All ordered products of a chain of step matrices.

    For ``steps[k] = S_k`` returns ``scale`` of shape ``(N+1, N+1)`` and
    ``unit`` of shape ``(N+1, N+1, r, r)`` with

    * ``j >= i``: ``S_{j-1} ... S_i = exp(scale[j, i]) unit[j, i]``;
    * ``j < i``: ``(S_{i-1} ... S_j)^{-1}``, built from ``inv_steps``.

    ``unit`` has unit Frobenius norm.
    """
    N, r, _ = steps.shape
    if inv_steps is None:
        inv_steps = np.linalg.inv(steps)
    scale = np.zeros((N + 1, N + 1))
    unit = np.zeros((N + 1, N + 1, r, r))
    eye = np.eye(r) / math.sqrt(r)
    idx = np.arange(N + 1)
    unit[idx, idx] = eye
    scale[idx, idx] = 0.5 * math.log(r)
    if r == 1:
        s = steps[:, 0, 0]
        logs = np.concatenate([[0.0], np.cumsum(np.log(np.abs(s)))])
        signs = np.concatenate([[1.0], np.cumprod(np.sign(s))])
        scale[:] = logs[:, None] - logs[None, :]
        unit[..., 0, 0] = signs[:, None] * signs[None, :]
        return scale, unit
    fwd, fsc = np.broadcast_to(eye, (N + 1, r, r)).copy(), np.full(N + 1, 0.5 * math.log(r))
    bwd, bsc = fwd.copy(), fsc.copy()
    for d in range(1, N + 1):
        i = np.arange(N - d + 1)
        fwd, ls = _normalise(steps[i + d - 1] @ fwd[: N - d + 1])
        fsc = fsc[: N - d + 1] + ls
        scale[i + d, i] = fsc
        unit[i + d, i] = fwd
        bwd, ls = _normalise(bwd[: N - d + 1] @ inv_steps[i + d - 1])
        bsc = bsc[: N - d + 1] + ls
        scale[i, i + d] = bsc
        unit[i, i + d] = bwd
    return scale, unit


@dataclass
class GrowthEstimate:
    """``|Phi(t, s)| <= K0 exp(a |t - s| + eps_bar s)`` on the fitted samples.

    ``residual`` is the largest value of
    ``ln|Phi| - (ln K0 + a |t-s| + eps_bar s)`` over the samples; it is
    non-positive by construction.  ``validation_slack`` is the same quantity
    on an independent fresh sample (``None`` if not checked).
    """

    K0: float
    a: float
    eps_bar: float
    residual: float
    n_samples: int
    horizon: float
    validation_slack: float | None = None

    @property
    def log_K0(self) -> float:
        return math.log(self.K0)

    def bound(self, t, s) -> np.ndarray:
        t, s = np.asarray(t, float), np.asarray(s, float)
        return self.log_K0 + self.a * np.abs(t - s) + self.eps_bar * s

    def as_dict(self) -> dict:
        return {"K0": self.K0, "a": self.a, "eps_bar": self.eps_bar,
                "residual": self.residual, "n_samples": self.n_samples,
                "horizon": self.horizon, "validation_slack": self.validation_slack}


@dataclass
class StepStats:
    nfev: int = 0
    n_steps: int = 0
    local_solves: int = 0


class TransitionOperator:
    """Cached evaluator of ``Phi(t, s)`` for a :class:`LinearSystem`.

    Parameters
    ----------
    system : LinearSystem
    step : float
        Checkpoint spacing (default 0.5).
    rtol, atol : float
        Integrator tolerances.
    """

    def __init__(self, system: LinearSystem, step: float = 0.5, rtol: float = 1e-10,
                 atol: float = 1e-10):
        self.system = system
        self.n = system.dim
        self.rtol, self.atol = float(rtol), float(atol)
        T = float(system.horizon)
        N = max(1, int(math.ceil(T / step - 1e-9)))
        self.grid = np.linspace(0.0, T, N + 1)
        self.step = T / N
        self.N = N
        self.stats = StepStats()
        self._lock = threading.RLock()
        self._local_cache: dict[float, tuple] = {}
        self._pairs = None
        self.segments, self.inv_segments = self._integrate(
            self.grid[:-1], np.full(N, self.step), inverse=True, keep_pieces=True)
        self._build_checkpoints()

    # ------------------------------------------------------------ integration
    def _integrate(self, starts: np.ndarray, lengths: np.ndarray, inverse: bool = False,
                   keep_pieces: bool = False):
        """Propagators ``Phi(start + length, start)`` for a batch of intervals.

        Each interval is cut into pieces over which ``int |A|`` is at most
        ``GROWTH_BUDGET`` so that the absolute tolerance never swamps a
        decaying solution.  With ``inverse=True`` the inverse propagators are
        returned as well, assembled from the inverses of the pieces.  With
        ``keep_pieces`` the piece propagators are stored as ``self.pieces``
        (a list per interval) for callers needing well-conditioned steps.
        """
        m, n = starts.size, self.n
        if m == 0:
            empty = np.zeros((0, n, n))
            return (empty, empty) if inverse else empty
        A = self.system.A
        probe = np.linspace(0.0, 1.0, 17)
        peak = np.max(A.norm(starts[:, None] + probe[None, :] * lengths[:, None]), axis=1)
        pieces = np.maximum(1, np.ceil(1.25 * peak * lengths / GROWTH_BUDGET)).astype(int)
        owner = np.repeat(np.arange(m), pieces)
        pos = np.arange(owner.size) - np.repeat(np.cumsum(pieces) - pieces, pieces)
        h = lengths[owner] / pieces[owner]
        t0 = starts[owner] + pos * h
        props = self._solve(t0, h)
        if keep_pieces:
            bounds = np.r_[0, np.cumsum(pieces)]
            self.pieces = [props[bounds[i]:bounds[i + 1]] for i in range(m)]
        width = int(pieces.max())
        stack = np.broadcast_to(np.eye(n), (m, width, n, n)).copy()
        stack[owner, pos] = props
        out = stack[:, 0].copy()
        for q in range(1, width):
            out = stack[:, q] @ out
        if not np.all(np.isfinite(out)):
            raise IntegrationError("segment propagator is not finite", t=float(starts[0]))
        if not inverse:
            return out
        stack[owner, pos] = np.linalg.inv(props)
        inv = stack[:, 0].copy()
        for q in range(1, width):
            inv = inv @ stack[:, q]
        return out, inv

    def _solve(self, starts: np.ndarray, lengths: np.ndarray) -> np.ndarray:
        m, n = starts.size, self.n
        A = self.system.A
        eye = np.broadcast_to(np.eye(n), (m, n, n)).reshape(-1)

        def rhs(tau, y):
            X = y.reshape(m, n, n)
            At = A(starts + tau * lengths) * lengths[:, None, None]
            return (At @ X).reshape(-1)

        sol = integrate.solve_ivp(rhs, (0.0, 1.0), eye, method="RK45",
                                  rtol=self.rtol, atol=self.atol)
        if not sol.success:
            raise IntegrationError(f"integrator failed: {sol.message}", t=float(starts[0]))
        with self._lock:
            self.stats.nfev += sol.nfev
            self.stats.n_steps += sol.t.size - 1
        return sol.y[:, -1].reshape(m, n, n)

    def _build_checkpoints(self):
        N, n = self.N, self.n
        fu = np.empty((N + 1, n, n))
        fs = np.empty(N + 1)
        iu = np.empty((N + 1, n, n))
        ins = np.empty(N + 1)
        fu[0] = iu[0] = np.eye(n)
        fs[0] = ins[0] = 0.0
        for k in range(N):
            u, ls = _normalise(self.segments[k] @ fu[k])
            fu[k + 1], fs[k + 1] = u, fs[k] + ls
            u, ls = _normalise(iu[k] @ self.inv_segments[k])
            iu[k + 1], ins[k + 1] = u, ins[k] + ls
        self.fwd_unit, self.fwd_scale = fu, fs
        self.inv_unit, self.inv_scale = iu, ins
        pu, pls = _normalise(fu @ iu)
        with np.errstate(over="ignore", invalid="ignore"):
            prod = np.exp(fs + ins + pls)[:, None, None] * pu - np.eye(n)
        finite = np.all(np.isfinite(prod), axis=(-2, -1))
        res = np.full(N + 1, np.inf)
        res[finite] = np.exp(spectral_lognorm(prod[finite]))
        self.inverse_residual = res

    @property
    def segment_inverse_residual(self) -> float:
        """``max_k |Phi(t_k+1, t_k) Phi(t_k, t_k+1) - I|``.

        Unlike ``inverse_residual`` this stays meaningful when ``Phi(t_k, 0)``
        is too ill-conditioned for its product with the inverse to be
        represented in double precision.
        """
        prod = self.segments @ self.inv_segments - np.eye(self.n)
        return float(np.max(np.linalg.norm(prod, 2, axis=(-2, -1))))

    # ---------------------------------------------------------------- lookup
    def _index(self, t: float) -> tuple[int, float]:
        k = int(min(self.N - 1, max(0, math.floor(t / self.step))))
        if t >= self.grid[k + 1] - 1e-12 * max(1.0, t):
            k = min(self.N, k + 1)
        return k, t - self.grid[k]

    def local(self, times, inverse: bool = False):
        """``Phi(t, t_k)`` with ``t_k`` the checkpoint at or below each ``t``.

        With ``inverse=True`` also returns ``Phi(t_k, t)``, assembled from
        the inverses of well-conditioned pieces rather than by inverting a
        possibly stiff propagator.
        """
        times = np.atleast_1d(np.asarray(times, float))
        n = self.n
        out = np.empty((times.size, n, n))
        inv_out = np.empty((times.size, n, n))
        todo = []
        with self._lock:
            for j, t in enumerate(times):
                k, tau = self._index(float(t))
                if tau <= 1e-12:
                    out[j] = inv_out[j] = np.eye(n)
                elif float(t) in self._local_cache:
                    out[j], inv_out[j] = self._local_cache[float(t)]
                else:
                    todo.append((j, k, tau))
        if todo:
            starts = np.array([self.grid[k] for _, k, _ in todo])
            lengths = np.array([tau for _, _, tau in todo])
            # unique to avoid duplicate work in a batch
            keys, inv = np.unique(starts + lengths, return_inverse=True)
            first = np.array([np.flatnonzero(inv == u)[0] for u in range(keys.size)])
            props, iprops = self._integrate(starts[first], lengths[first], inverse=True)
            with self._lock:
                self.stats.local_solves += keys.size
                for u in range(keys.size):
                    key = float(times[todo[first[u]][0]])
                    self._local_cache[key] = (props[u], iprops[u])
            for q, (j, _, _) in enumerate(todo):
                out[j] = props[inv[q]]
                inv_out[j] = iprops[inv[q]]
        return (out, inv_out) if inverse else out

    def grid_log_transition(self, j: int, i: int):
        """``Phi(t_j, t_i)`` as ``(scale, unit)``."""
        if j == i:
            return 0.0, np.eye(self.n)
        ok = self.inverse_residual[j] <= INVERSE_RESIDUAL_MAX and \
            self.inverse_residual[i] <= INVERSE_RESIDUAL_MAX
        if ok:
            u, ls = _normalise(self.fwd_unit[j] @ self.inv_unit[i])
            return self.fwd_scale[j] + self.inv_scale[i] + ls, u
        self._ensure_pairs()
        return self._pairs[0][j, i], self._pairs[1][j, i]

    def _ensure_pairs(self):
        with self._lock:
            if self._pairs is None:
                self._pairs = chain_products(self.segments, self.inv_segments)
        return self._pairs

    def log_transition(self, t: float, s: float):
        """``Phi(t, s) = exp(scale) * unit`` for arbitrary ``t, s``."""
        T = self.system.horizon
        t, s = check_times([t, s], T)
        kt, _ = self._index(float(t))
        ks, _ = self._index(float(s))
        if t == s:
            return 0.0, np.eye(self.n)
        L, L_inv = self.local([t, s], inverse=True)
        Lt, right = L[0], L_inv[1]
        sc, mid = self.grid_log_transition(kt, ks)
        u, ls = _normalise(Lt @ mid @ right)
        return sc + ls, u

    def transition(self, t: float, s: float) -> np.ndarray:
        sc, u = self.log_transition(t, s)
        with np.errstate(over="ignore"):
            out = math.exp(sc) * u if sc < 709 else np.full_like(u, np.inf)
        if not np.all(np.isfinite(out)):
            raise ConditioningError("transition overflows double precision; "
                                    "use log_transition", t=float(t))
        return out

    def log_norm(self, t: float, s: float) -> float:
        sc, u = self.log_transition(t, s)
        return float(sc + spectral_lognorm(u[None])[0])

    def grid_log_norms(self) -> np.ndarray:
        """``ln|Phi(t_j, t_i)|`` for all checkpoint pairs."""
        scale, unit = self._ensure_pairs()
        return scale + spectral_lognorm(unit)

    def log_norms(self, ts, ss) -> np.ndarray:
        """Vectorised ``ln|Phi(t, s)|`` for arbitrary pairs."""
        ts = check_times(ts, self.system.horizon).ravel()
        ss = check_times(ss, self.system.horizon).ravel()
        scale, unit = self._ensure_pairs()
        kt = np.array([self._index(float(t))[0] for t in ts])
        ks = np.array([self._index(float(s))[0] for s in ss])
        Lt = self.local(ts)
        Ls_inv = self.local(ss, inverse=True)[1]
        prod, ls = _normalise(Lt @ unit[kt, ks] @ Ls_inv)
        return scale[kt, ks] + ls + spectral_lognorm(prod)

    def checkpoint_table(self) -> np.ndarray:
        """Rows ``(t, ln|Phi(t,0)|, cond(Phi(t,0)))`` for the CSV dump."""
        ln = self.fwd_scale + spectral_lognorm(self.fwd_unit)
        if self.n == 1:
            cond = np.ones_like(ln)
        else:
            sv = np.linalg.svd(self.fwd_unit, compute_uv=False)
            with np.errstate(divide="ignore"):
                cond = sv[:, 0] / sv[:, -1]
        return np.c_[self.grid, ln, cond]


def transition(op: TransitionOperator, t: float, s: float) -> np.ndarray:
    """``Phi(t, s)`` of the operator's system."""
    return op.transition(t, s)


def scalar_log_transition(system: LinearSystem, t: float, s: float, *, chunk: float = 1.0,
                          epsabs: float = 1e-13, epsrel: float = 1e-13) -> float:
    """``int_s^t A(tau) d tau`` for a one-dimensional system by adaptive quadrature."""
    if system.dim != 1:
        raise ValueError("scalar_log_transition needs a one-dimensional system")
    t, s = (float(x) for x in check_times([t, s], system.horizon))
    if t == s:
        return 0.0
    lo, hi, sign = (s, t, 1.0) if t > s else (t, s, -1.0)
    edges = np.linspace(lo, hi, max(2, int(math.ceil((hi - lo) / chunk)) + 1))
    f = system.A.entries[0] if hasattr(system.A, "entries") else None

    def integrand(x):
        return float(f(x)) if f is not None else float(system.A(np.array([x]))[0, 0, 0])

    total = 0.0
    for a, b in zip(edges[:-1], edges[1:]):
        val, err, info = integrate.quad(integrand, a, b, epsabs=epsabs, epsrel=epsrel,
                                        limit=200, full_output=1)[:3]
        if err > 1e-8 * max(1.0, abs(val)):
            raise IntegrationError("quadrature did not converge", t=float(a))
        total += val
    return sign * total


def _pair_points(op: TransitionOperator, v_grid: np.ndarray):
    g = op.grid
    J, I = np.meshgrid(np.arange(g.size), np.arange(g.size), indexing="ij")
    d = np.abs(g[J] - g[I])
    w = g[I]
    return EnvelopePoints(d.ravel(), w.ravel(), v_grid.ravel()), J.ravel(), I.ravel()


def _zoom_pairs(centers_t, centers_s, width, T, n=9):
    off = np.linspace(-width, width, n)
    tt = (centers_t[:, None, None] + off[None, :, None]).repeat(n, axis=2)
    ss = (centers_s[:, None, None] + off[None, None, :]).repeat(n, axis=1)
    tt, ss = np.clip(tt, 0, T).ravel(), np.clip(ss, 0, T).ravel()
    return tt, ss


def fit_growth(op: TransitionOperator, sample_pairs=None, *, tau: float = 0.1,
               refine_rounds: int = 2, n_active: int = 24, rng=None,
               n_validate: int = 0) -> GrowthEstimate:
    """Fit ``ln|Phi(t,s)| <= ln K0 + a|t-s| + eps_bar s``.

    With ``sample_pairs=None`` all checkpoint pairs are used and the binding
    pairs are then refined on zoomed off-grid sub-grids.  Explicit pairs are
    used as given.  ``a`` is minimised first, then ``eps_bar``, then ``K0``.
    """
    T = op.system.horizon
    if sample_pairs is None:
        pts, _, _ = _pair_points(op, op.grid_log_norms())
    else:
        pairs = np.asarray(sample_pairs, float).reshape(-1, 2)
        if np.all(pairs[:, 0] == pairs[:, 1]):
            raise FitError("degenerate samples: every pair has t == s")
        v = op.log_norms(pairs[:, 0], pairs[:, 1])
        pts = EnvelopePoints(np.abs(pairs[:, 0] - pairs[:, 1]), pairs[:, 1], v)
        refine_rounds = 0
    if np.all(pts.d == 0):
        raise FitError("degenerate samples: every pair has t == s")
    grid = np.linspace(0, T, 2001)
    rate_max = float(np.max(op.system.A.norm(grid))) + 1.0
    keep = prune(pts)
    work = pts.take(keep)
    g, a, e = fit_growth_rate(work, tau=tau, rate_max=rate_max)
    width = op.step
    for _ in range(refine_rounds):
        slack = work.v - a * work.d - e * work.w
        order = np.argsort(slack)[::-1][:n_active]
        # recover (t, s) from (d, w): s = w and t = s +- d; try both signs
        s_c = work.w[order]
        t_c = np.concatenate([s_c + work.d[order], s_c - work.d[order]])
        s_c = np.concatenate([s_c, s_c])
        ok = (t_c >= 0) & (t_c <= T)
        tt, ss = _zoom_pairs(t_c[ok], s_c[ok], width, T)
        v = op.log_norms(tt, ss)
        extra = EnvelopePoints(np.abs(tt - ss), ss, v)
        work = work.concat(extra)
        work = work.take(prune(work))
        g, a, e = fit_growth_rate(work, tau=tau, rate_max=rate_max)
        width /= 4
    logK0 = max(0.0, g)
    residual = float(np.max(pts.v - (logK0 + a * pts.d + e * pts.w)))
    residual = max(residual, float(np.max(work.v - (logK0 + a * work.d + e * work.w))))
    est = GrowthEstimate(math.exp(logK0), a, e, residual, len(pts), T)
    if n_validate:
        rng = np.random.default_rng(rng)
        tt, ss = rng.uniform(0, T, n_validate), rng.uniform(0, T, n_validate)
        v = op.log_norms(tt, ss)
        est.validation_slack = float(np.max(v - est.bound(tt, ss)))
    return est
