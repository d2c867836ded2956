"""Nonuniform exponential dichotomy tests for shifted systems.

For a shift ``lam`` the shifted flow is ``exp(-lam (t-s)) Phi(t, s)``.  The
test proceeds in three stages:

1. the rank of the projector is read off the shifted growth exponents of a
   generic QR propagation up to the split time;
2. an invariant splitting is built on the checkpoint grid: the range of
   ``P`` is propagated backwards from the end of the horizon (only the
   stable family is unique on a half-line) and its complement forwards from
   the orthogonal complement at ``t = 0``;
3. the constants ``(K, alpha, eps)`` are fitted to the log-norms of the
   projected flow over all checkpoint pairs, refined off-grid where the fit
   binds, and the result is judged against the admission policy.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field, replace

import numpy as np

from .envelope import EnvelopePoints, fit_decay, prune
from .errors import NoGapError
from .flow import TransitionOperator, _normalise, chain_products, spectral_lognorm
from .sysmodel import LinearSystem
from .validation import check_real

__all__ = [
    "ShiftedSystem",
    "DichotomyPlan",
    "DichotomyVerdict",
    "ProjectorFamily",
    "shift_system",
    "estimate_projector",
    "test_dichotomy",
    "operator_for",
]

_GENERIC_SEED = 20240917
_OVERFLOW_LOG = math.log(1e300)


def operator_for(system_or_op) -> TransitionOperator:
    if isinstance(system_or_op, TransitionOperator):
        return system_or_op
    if isinstance(system_or_op, ShiftedSystem):
        return system_or_op.op
    return _shared_operator(system_or_op)


_OP_CACHE: dict[int, tuple[LinearSystem, TransitionOperator]] = {}
_OP_LOCK = threading.Lock()


def _shared_operator(system: LinearSystem) -> TransitionOperator:
    # operators are immutable after construction, so one per system suffices
    with _OP_LOCK:
        hit = _OP_CACHE.get(id(system))
        if hit is not None and hit[0] is system:
            return hit[1]
    op = TransitionOperator(system)
    with _OP_LOCK:
        if len(_OP_CACHE) > 32:
            _OP_CACHE.clear()
        _OP_CACHE[id(system)] = (system, op)
    return op


@dataclass(frozen=True, eq=False)
class ShiftedSystem:
    """``x' = (A(t) - lam I) x`` sharing the base transition operator."""

    base: LinearSystem
    lam: float
    op: TransitionOperator

    def log_transition(self, t: float, s: float):
        sc, u = self.op.log_transition(t, s)
        return sc - self.lam * (float(t) - float(s)), u

    def transition(self, t: float, s: float) -> np.ndarray:
        sc, u = self.log_transition(t, s)
        return math.exp(sc) * u


def shift_system(system, lam: float) -> ShiftedSystem:
    """Shift by ``lam``; values are rescaled, never re-integrated."""
    lam = check_real(lam, "lam")
    op = operator_for(system)
    return ShiftedSystem(op.system, lam, op)


# ----------------------------------------------------------------- QR passes

def _generic_pass(op: TransitionOperator):
    """Forward QR propagation from a fixed generic orthogonal frame."""
    cached = getattr(op, "_generic_qr", None)
    if cached is not None:
        return cached
    n, N = op.n, op.N
    rng = np.random.default_rng(_GENERIC_SEED)
    Q0, _ = np.linalg.qr(rng.standard_normal((n, n)))
    Q = np.empty((N + 1, n, n))
    ell = np.zeros((N + 1, n))
    Q[0] = Q0
    # piece by piece: one segment may stretch directions apart beyond 1e16
    for k in range(N):
        q, acc = Q[k], ell[k].copy()
        for piece in op.pieces[k]:
            q, r = np.linalg.qr(piece @ q)
            sg = np.sign(np.diag(r))
            sg[sg == 0] = 1.0
            q = q * sg
            acc += np.log(np.abs(np.diag(r)))
        Q[k + 1], ell[k + 1] = q, acc
    op._generic_qr = (Q, ell)
    return Q, ell


def _complement(basis: np.ndarray) -> np.ndarray:
    """Orthonormal complement of the column span (batched)."""
    n, r = basis.shape[-2:]
    q, _ = np.linalg.qr(basis, mode="complete")
    return q[..., :, r:]


class ProjectorFamily:
    """Invariant splitting of rank ``rank`` on the checkpoint grid.

    ``W[k]`` spans the range of ``P(t_k)`` and ``U[k]`` its kernel.  The norm
    tables hold ``ln|Phi(t_j,t_i) P(t_i)|`` for ``j >= i`` and
    ``ln|Phi(t_j,t_i)(I - P(t_i))|`` for ``j <= i``; shifts enter later.
    """

    def __init__(self, op: TransitionOperator, rank: int, start_index: int | None = None):
        n, N = op.n, op.N
        if not 0 <= rank <= n:
            raise ValueError(f"rank must lie in [0, {n}]")
        self.op, self.rank, self.n = op, rank, n
        self.p = n - rank
        start = N if start_index is None else int(start_index)
        Qg, _ = _generic_pass(op)
        r, p = rank, self.p
        if 0 < r < n:
            W = np.empty((N + 1, n, r))
            W[start] = Qg[start][:, p:]
            Rb_inv = np.empty((N, r, r))
            Rb = np.empty((N, r, r))
            for k in range(start - 1, -1, -1):
                q, rr = np.linalg.qr(op.inv_segments[k] @ W[k + 1])
                W[k], Rb[k] = q, rr
            for k in range(start, N):
                q, rr = np.linalg.qr(op.segments[k] @ W[k])
                W[k + 1] = q
                Rb[k] = np.linalg.inv(rr)
            Rb_inv = np.linalg.inv(Rb)
            Z0 = _complement(W[0])
            U = np.empty((N + 1, n, p))
            Y = np.empty((N + 1, n, r))
            Ru = np.empty((N, p, p))
            frame = np.concatenate([Z0, W[0]], axis=1)
            for k in range(N):
                q, rr = np.linalg.qr(op.segments[k] @ frame)
                U[k], Y[k] = frame[:, :p], frame[:, p:]
                Ru[k] = rr[:p, :p]
                frame = q
            U[N], Y[N] = frame[:, :p], frame[:, p:]
            # the span of the leading columns is exactly Phi U_0; re-orthonormalised
            Z = _complement(W)
            self.W, self.U, self.Y, self.Z = W, U, Y, Z
            self.Xs = np.linalg.inv(np.swapaxes(Y, -1, -2) @ W)
            self.Xu = np.linalg.inv(np.swapaxes(Z, -1, -2) @ U)
            self._stable = chain_products(Rb_inv, Rb)
            self._unstable = chain_products(Ru)
        self._tables = None
        self._lock = threading.Lock()

    # ------------------------------------------------------------ projectors
    def at_grid(self, k: int) -> np.ndarray:
        n, r = self.n, self.rank
        if r == 0:
            return np.zeros((n, n))
        if r == n:
            return np.eye(n)
        return self.W[k] @ self.Xs[k] @ self.Y[k].T

    def at(self, t: float) -> np.ndarray:
        """``P(t) = Phi(t, t_k) P(t_k) Phi(t, t_k)^{-1}``."""
        k, _ = self.op._index(float(t))
        L, L_inv = self.op.local([t], inverse=True)
        return L[0] @ self.at_grid(k) @ L_inv[0]

    # ----------------------------------------------------------------- tables
    def tables(self):
        """``(stable, unstable)`` log-norm tables; ``-inf`` where undefined."""
        with self._lock:
            if self._tables is not None:
                return self._tables
            op, N = self.op, self.op.N
            J, I = np.meshgrid(np.arange(N + 1), np.arange(N + 1), indexing="ij")
            fwd = J >= I
            bwd = J <= I
            st = np.full((N + 1, N + 1), -np.inf)
            un = np.full((N + 1, N + 1), -np.inf)
            if self.rank == self.n:
                st[fwd] = op.grid_log_norms()[fwd]
            elif self.rank == 0:
                un[bwd] = op.grid_log_norms()[bwd]
            else:
                sc, u = self._stable
                m = u @ self.Xs[None, :, :, :]
                st[fwd] = (sc + spectral_lognorm(m))[fwd]
                sc, u = self._unstable
                m = u @ self.Xu[None, :, :, :]
                un[bwd] = (sc + spectral_lognorm(m))[bwd]
            self._tables = (st, un)
            return self._tables

    def log_norms(self, ts, ss, side: str) -> np.ndarray:
        """Projected log-norms at arbitrary pairs (``side`` is stable/unstable)."""
        op = self.op
        ts = np.asarray(ts, float).ravel()
        ss = np.asarray(ss, float).ravel()
        if (side == "stable" and self.rank == 0) or (side == "unstable" and self.rank == self.n):
            return np.full(ts.size, -np.inf)
        if (side == "stable" and self.rank == self.n) or (side == "unstable" and self.rank == 0):
            return op.log_norms(ts, ss)
        kt = np.array([op._index(float(t))[0] for t in ts])
        ks = np.array([op._index(float(s))[0] for s in ss])
        Lt = op.local(ts)
        Ls_inv = op.local(ss, inverse=True)[1]
        if side == "stable":
            sc, u = self._stable
            core = self.W[kt] @ u[kt, ks] @ self.Xs[ks] @ np.swapaxes(self.Y[ks], -1, -2)
        else:
            sc, u = self._unstable
            core = self.U[kt] @ u[kt, ks] @ self.Xu[ks] @ np.swapaxes(self.Z[ks], -1, -2)
        prod, ls = _normalise(Lt @ core @ Ls_inv)
        return sc[kt, ks] + ls + spectral_lognorm(prod)


def _family(op: TransitionOperator, rank: int) -> ProjectorFamily:
    with op._lock:
        cache = op.__dict__.setdefault("_families", {})
        fam = cache.get(rank)
        if fam is None:
            fam = ProjectorFamily(op, rank)
            cache[rank] = fam
        return fam


def estimate_projector(shifted: ShiftedSystem, split_time: float, gap_min: float = 2.0):
    """Projector rank and an orthonormal stable basis at ``t = 0``.

    The shifted growth exponents over ``[0, split_time]`` (logarithms of the
    singular values of the shifted flow, obtained from a QR propagation of a
    generic frame) are compared with zero: directions below zero are
    stable.  Every exponent must keep a distance of at least ``gap_min`` from
    zero, otherwise :class:`NoGapError` is raised.
    """
    op = shifted.op
    T = op.system.horizon
    split_time = check_real(split_time, "split_time")
    if not 0 < split_time <= T * (1 + 1e-12):
        raise ValueError(f"split_time must lie in (0, {T}]")
    k = int(round(min(split_time, T) / op.step))
    k = max(1, min(op.N, k))
    _, ell = _generic_pass(op)
    sigma = ell[k] - shifted.lam * op.grid[k]
    closest = float(np.min(np.abs(sigma)))
    if closest < gap_min:
        raise NoGapError(f"shifted exponents {np.round(sigma, 3).tolist()} within {gap_min} "
                         f"of zero at split time {op.grid[k]:.6g}; lam={shifted.lam} is likely "
                         f"in the spectrum")
    rank = int(np.sum(sigma < 0))
    if rank == 0:
        basis = np.zeros((op.n, 0))
    elif rank == op.n:
        basis = np.eye(op.n)
    else:
        basis = ProjectorFamily(op, rank, start_index=k).W[0]
    return rank, basis


# ------------------------------------------------------------------ verdicts

@dataclass(frozen=True)
class DichotomyPlan:
    """Sampling plan and admission policy for :func:`test_dichotomy`.

    ``log_k_max`` caps ``ln K``: on a finite horizon every shift admits some
    envelope if ``K`` is unbounded.  ``eps_ratio`` imposes
    ``eps <= eps_ratio * alpha``; ``None`` leaves ``eps`` free below
    ``eps_cap``.  ``weight`` selects the nonuniformity weight: ``"min"``
    uses ``eps * min(t, s)`` on both families, ``"s"`` uses ``eps * s``.
    """

    n_pairs: int = 400
    alpha_min: float = 0.01
    eps_ratio: float | None = None
    eps_cap: float = 50.0
    log_k_max: float = 1.5
    tau: float = 0.5
    gap_min: float = 2.0
    split_time: float | None = None
    refine_rounds: int = 2
    n_active: int = 16
    weight: str = "min"
    validate: bool = True
    validation_slack: float = 0.2
    seed: int = 0


@dataclass
class DichotomyVerdict:
    lam: float
    admits: bool
    K: float
    alpha: float
    eps: float
    projector_rank: int
    stable_basis: np.ndarray
    margin: float
    flags: tuple = ()
    validation_slack: float | None = None
    n_samples: int = 0

    @property
    def log_K(self) -> float:
        return math.log(self.K) if np.isfinite(self.K) else math.inf

    def as_dict(self) -> dict:
        return {"lambda": self.lam, "admits": bool(self.admits), "K": self.K,
                "alpha": self.alpha, "eps": self.eps, "rank": self.projector_rank,
                "margin": self.margin, "flags": list(self.flags),
                "validation_slack": self.validation_slack}


def _failed(lam, n, flags, rank=-1):
    return DichotomyVerdict(lam, False, math.inf, 0.0, math.inf, rank,
                            np.zeros((n, 0)), math.inf, tuple(flags))


def _base_points(fam: ProjectorFamily, weight: str):
    """λ-free point sets of both families, pruned per family."""
    key = ("points", weight)
    cache = fam.__dict__.setdefault("_points", {})
    if key in cache:
        return cache[key]
    g = fam.op.grid
    st, un = fam.tables()
    out = []
    J, I = np.meshgrid(np.arange(g.size), np.arange(g.size), indexing="ij")
    for table, sign in ((st, -1.0), (un, 1.0)):
        ok = np.isfinite(table) & (J != I)
        j, i = J[ok], I[ok]
        d = np.abs(g[j] - g[i])
        w = np.minimum(g[j], g[i]) if weight == "min" else g[i]
        pts = EnvelopePoints(d, w, table[ok])
        keep = prune(pts)
        out.append((pts.take(keep), sign, g[j][keep], g[i][keep]))
    cache[key] = out
    return out


def _side_points(fam, lam, ts, ss, side, weight):
    v = fam.log_norms(ts, ss, side)
    d = np.abs(ts - ss)
    w = np.minimum(ts, ss) if weight == "min" else ss
    sign = -1.0 if side == "stable" else 1.0
    return EnvelopePoints(d, w, v + sign * lam * d)


def _random_pairs(T, n, rng, side):
    a, b = rng.uniform(0, T, n), rng.uniform(0, T, n)
    hi, lo = np.maximum(a, b), np.minimum(a, b)
    return (hi, lo) if side == "stable" else (lo, hi)


_LATTICE = 64.0


def _zoom(t_c, s_c, width, T, side, n=9):
    off = np.linspace(-width, width, n)
    tt = np.clip(t_c[:, None, None] + off[None, :, None] + 0 * off[None, None, :], 0, T).ravel()
    ss = np.clip(s_c[:, None, None] + 0 * off[None, :, None] + off[None, None, :], 0, T).ravel()
    # snap to a lattice so nearby shifts reuse cached local propagators
    tt, ss = np.round(tt * _LATTICE) / _LATTICE, np.round(ss * _LATTICE) / _LATTICE
    ok = tt >= ss if side == "stable" else tt <= ss
    return tt[ok], ss[ok]


def fit_family(fam: ProjectorFamily, lam: float, plan: DichotomyPlan, *, sides=None):
    """Fit ``(g, alpha, eps)`` for the projected shifted flow.

    Returns ``(g, alpha, eps, points)``, where ``points`` is the final
    constraint set with the shift applied.
    """
    T = fam.op.system.horizon
    base = _base_points(fam, plan.weight)
    sides = sides or ("stable", "unstable")
    groups = []
    for (pts, sign, tj, ti), side in zip(base, ("stable", "unstable")):
        if side not in sides or len(pts) == 0:
            continue
        groups.append([side, EnvelopePoints(pts.d, pts.w, pts.v + sign * lam * pts.d), tj, ti])
    rng = np.random.default_rng(plan.seed)
    for grp in groups:
        tt, ss = _random_pairs(T, plan.n_pairs, rng, grp[0])
        extra = _side_points(fam, lam, tt, ss, grp[0], plan.weight)
        grp[1] = grp[1].concat(extra)
        grp[2], grp[3] = np.r_[grp[2], tt], np.r_[grp[3], ss]

    def solve():
        pts = groups[0][1]
        for grp in groups[1:]:
            pts = pts.concat(grp[1])
        return fit_decay(pts, alpha_min=plan.alpha_min, tau=plan.tau,
                         eps_ratio=plan.eps_ratio, eps_cap=plan.eps_cap), pts

    if not groups:
        return 0.0, math.inf, 0.0, EnvelopePoints([], [], [])
    (g, alpha, eps), pts = solve()
    width = fam.op.step
    for _ in range(plan.refine_rounds):
        for grp in groups:
            side, P, tj, ti = grp
            slack = P.v + alpha * P.d - eps * P.w
            order = np.argsort(slack)[::-1][: plan.n_active]
            tt, ss = _zoom(tj[order], ti[order], width, T, side)
            extra = _side_points(fam, lam, tt, ss, side, plan.weight)
            merged = P.concat(extra)
            tj2, ti2 = np.r_[tj, tt], np.r_[ti, ss]
            keep = prune(EnvelopePoints(merged.d, merged.w, merged.v))
            grp[1], grp[2], grp[3] = merged.take(keep), tj2[keep], ti2[keep]
        (g, alpha, eps), pts = solve()
        width /= 4
    return g, alpha, eps, pts


def test_dichotomy(system, lam: float, params: DichotomyPlan | None = None) -> DichotomyVerdict:
    """Judge whether ``A - lam I`` admits a nonuniform exponential dichotomy.

    The verdict admits when the fitted decay rate reaches ``alpha_min`` and
    ``ln K`` stays within ``log_k_max``.  A missing gap at the split time or
    an overflowing projected flow are reported as non-admission with a
    distinct flag.
    """
    plan = params or DichotomyPlan()
    lam = check_real(lam, "lam")
    op = operator_for(system)
    n, T = op.n, op.system.horizon
    split = plan.split_time or min(T, 40.0 / plan.alpha_min)
    shifted = ShiftedSystem(op.system, lam, op)
    try:
        rank, basis = estimate_projector(shifted, split, plan.gap_min)
    except NoGapError:
        return _failed(lam, n, ("no_gap",))
    fam = _family(op, rank)
    g, alpha, eps, pts = fit_family(fam, lam, plan)
    flags = []
    if pts.v.size and float(np.max(pts.v)) > _OVERFLOW_LOG:
        return _failed(lam, n, ("overflow",), rank)
    log_k = max(0.0, g)
    vslack = None
    if plan.validate:
        vslack = _validate(fam, lam, plan, log_k, alpha, eps)
        if vslack < -plan.validation_slack:
            # refit with the fresh pairs included
            flags.append("refit")
            plan2 = replace(plan, seed=plan.seed + 7919, n_pairs=3 * plan.n_pairs)
            g, alpha, eps, pts = fit_family(fam, lam, plan2)
            log_k = max(0.0, g)
            vslack = _validate(fam, lam, plan, log_k, alpha, eps)
    margin = float(np.max(pts.v + alpha * pts.d - eps * pts.w) - log_k) if pts.v.size else 0.0
    admits = True
    if alpha < plan.alpha_min * (1 - 1e-9):
        admits = False
        flags.append("alpha_below_min")
    if log_k > plan.log_k_max:
        admits = False
        flags.append("K_above_max")
    if eps >= alpha:
        flags.append("eps_exceeds_alpha")
    return DichotomyVerdict(lam, admits, math.exp(log_k), alpha, eps, rank, basis, margin,
                            tuple(flags), vslack, len(pts))


def _validate(fam, lam, plan, log_k, alpha, eps) -> float:
    """Smallest slack ``ln K - (v + alpha d - eps w)`` on fresh random pairs."""
    T = fam.op.system.horizon
    rng = np.random.default_rng(plan.seed + 104729)
    worst = math.inf
    for side in ("stable", "unstable"):
        if (side == "stable" and fam.rank == 0) or (side == "unstable" and fam.rank == fam.n):
            continue
        tt, ss = _random_pairs(T, 2 * plan.n_pairs, rng, side)
        pts = _side_points(fam, lam, tt, ss, side, plan.weight)
        worst = min(worst, float(np.min(log_k - (pts.v + alpha * pts.d - eps * pts.w))))
    return worst
