"""Scalar channel machinery: dichotomy constants, crossing times, smoothing."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import optimize

from .dichotomy import DichotomyPlan, _family, fit_family, operator_for, test_dichotomy
from .envelope import fit_decay
from .errors import ContractionError
from .flow import GrowthEstimate, fit_growth
from .sysmodel import LinearSystem

__all__ = [
    "CumulativeIntegral",
    "ScalarDichotomyConstants",
    "ScheduleConstants",
    "CrossingSchedule",
    "PiecewiseLinear",
    "SmoothedSchedule",
    "scalar_dichotomy_constants",
    "select_constants",
    "build_crossing_schedule",
    "smooth_schedule",
    "CONTRACTION_PLAN",
]

_GL_X, _GL_W = np.polynomial.legendre.leggauss(8)

# Step 2 uses the eps*s weight of the definition; ln K is only loosely capped
CONTRACTION_PLAN = DichotomyPlan(weight="s", log_k_max=25.0, tau=4.0)
_TIGHT_TAU, _KEEP_RATE = 0.1, 0.9


class CumulativeIntegral:
    """``F(t) = int_0^t f`` by 8-point Gauss-Legendre on cells of width ``h``."""

    def __init__(self, f, horizon: float, h: float = 0.01):
        self.f, self.horizon = f, float(horizon)
        n = max(1, int(math.ceil(self.horizon / h - 1e-9)))
        self.edges = np.minimum(np.arange(n + 1) * h, self.horizon)
        self.edges[-1] = self.horizon
        self.h = h
        cells = self.local(self.edges[:-1], self.edges[1:])
        self.cum = np.r_[0.0, np.cumsum(cells)]

    def local(self, a, b) -> np.ndarray:
        """``int_a^b f`` for short intervals (vectorised)."""
        a, b = np.asarray(a, float), np.asarray(b, float)
        mid, half = 0.5 * (a + b), 0.5 * (b - a)
        x = mid[..., None] + half[..., None] * _GL_X
        return half * np.sum(self.f(x) * _GL_W, axis=-1)

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, float)
        k = np.clip(np.floor(t / self.h).astype(int), 0, self.edges.size - 2)
        return self.cum[k] + self.local(self.edges[k], t)


def _scalar_function(system: LinearSystem):
    A = system.A
    return lambda t: A(t)[..., 0, 0]


# ------------------------------------------------------------------ Step 2

@dataclass
class ScalarDichotomyConstants:
    """Merged Step 2 constants for one diagonal channel.

    ``beta`` bounds both shifted envelopes; ``K``, ``a_bar`` and ``eps_bar``
    come from the bounded-growth fit of the channel itself.
    """

    beta: float
    alpha: float
    eps: float
    K: float
    a_bar: float
    eps_bar: float
    interval: tuple
    M_delta: float
    refit: bool = False
    flags: tuple = ()
    sides: dict = field(default_factory=dict)

    @property
    def log_beta(self) -> float:
        return math.log(self.beta)

    @property
    def log_K(self) -> float:
        return math.log(self.K)

    def as_dict(self) -> dict:
        return {"beta": self.beta, "log_beta": self.log_beta, "alpha": self.alpha,
                "eps": self.eps, "K": self.K, "a_bar": self.a_bar, "eps_bar": self.eps_bar,
                "interval": list(self.interval), "M_delta": self.M_delta,
                "refit": self.refit, "flags": list(self.flags), "sides": self.sides}


def _joint_refit(point_sets, ratio: float = 0.9, alpha_min: float = 1e-3,
                 alpha_max: float = 1e3):
    """Fit one ``(beta, alpha, eps = ratio * alpha)`` over both sides.

    The intercept ``g(alpha) = max(v + alpha (d - ratio w))`` is convex, so
    its minimiser is found by golden-section search on a bracket.
    """
    pts = point_sets[0]
    for extra in point_sets[1:]:
        pts = pts.concat(extra)
    c = pts.d - ratio * pts.w

    def g(alpha):
        return float(np.max(pts.v + alpha * c))

    res = optimize.minimize_scalar(g, bounds=(alpha_min, alpha_max), method="bounded",
                                   options={"xatol": 1e-9})
    alpha = float(res.x)
    return max(0.0, g(alpha)), alpha, ratio * alpha


def scalar_dichotomy_constants(d_rr: LinearSystem, interval, M_delta: float, *,
                               plan: DichotomyPlan | None = None,
                               growth: GrowthEstimate | None = None,
                               allow_refit: bool = True) -> ScalarDichotomyConstants:
    """Dichotomy constants of ``d - (a - M)`` (``P = 0``) and ``d - (b + M)`` (``P = 1``).

    Each side is tested separately (projector ranks 0 and 1 are required);
    the merged triple is a joint fit over both sides' samples.  When it has
    ``alpha <= eps`` and ``allow_refit`` is set, a joint fit with
    ``eps = 0.9 alpha`` over both sides' samples replaces it (flagged
    ``refit``); otherwise :class:`ContractionError` is raised.
    """
    if d_rr.dim != 1:
        raise ContractionError("scalar_dichotomy_constants needs a 1-dimensional channel")
    a, b = map(float, interval)
    M = float(M_delta)
    if not (M > 0 and a <= b):
        raise ContractionError(f"bad interval {interval} or M_delta {M_delta}")
    plan = plan or CONTRACTION_PLAN
    op = operator_for(d_rr)
    growth = growth or fit_growth(op)
    lo = test_dichotomy(op, a - M, plan)
    hi = test_dichotomy(op, b + M, plan)
    for name, v, rank in (("lower", lo, 0), ("upper", hi, 1)):
        if not v.admits or v.projector_rank != rank:
            raise ContractionError(
                f"shifted channel at {v.lam:.4g} ({name} side) does not admit a dichotomy "
                f"with projector rank {rank} (rank={v.projector_rank}, flags={list(v.flags)}); "
                f"the spectral interval is likely mis-estimated", stage="step2")
    sets = []
    for v, rank in ((lo, 0), (hi, 1)):
        _, _, _, pts = fit_family(_family(op, rank), v.lam, plan)
        sets.append(pts)
    # one triple valid on both sides; the P = 0 side alone is degenerate
    # under the eps*s weight (alpha = eps -> infinity always fits)
    joint = sets[0].concat(sets[1])
    g, alpha, eps = fit_decay(joint, alpha_min=plan.alpha_min, tau=plan.tau,
                              eps_cap=plan.eps_cap)
    # a tight-budget fit wins when it keeps most of the rate at a smaller beta
    tight = fit_decay(joint, alpha_min=plan.alpha_min, tau=_TIGHT_TAU, eps_cap=plan.eps_cap)
    if tight[1] >= _KEEP_RATE * alpha and tight[1] > tight[2]:
        g, alpha, eps = tight
    beta = math.exp(max(0.0, g))
    sides = {"lower": lo.as_dict(), "upper": hi.as_dict()}
    refit, flags = False, []
    if not alpha > eps:
        if not allow_refit:
            raise ContractionError(f"alpha={alpha:.4g} <= eps={eps:.4g}: Step 2 needs alpha > eps",
                                   stage="step2")
        lnb, alpha, eps = _joint_refit(sets)
        beta = math.exp(lnb)
        refit = True
        flags.append("refit")
    return ScalarDichotomyConstants(beta=max(1.0, beta), alpha=alpha, eps=eps,
                                    K=max(1.0, growth.K0), a_bar=growth.a,
                                    eps_bar=growth.eps_bar, interval=(a, b), M_delta=M,
                                    refit=refit, flags=tuple(flags), sides=sides)


# ------------------------------------------------------------ constants

@dataclass(frozen=True)
class ScheduleConstants:
    """``N, xi, p, xi_bar, p_bar`` and the floor used to screen ``N_bar``."""

    N: float
    xi: float
    p: float
    xi_bar: float
    p_bar: float
    N_bar_floor: float
    N_bar_c4: float

    def as_dict(self) -> dict:
        return {"N": self.N, "xi": self.xi, "p": self.p, "xi_bar": self.xi_bar,
                "p_bar": self.p_bar, "N_bar_floor": self.N_bar_floor,
                "N_bar_c4": self.N_bar_c4}


def select_constants(sdc: ScalarDichotomyConstants, interval=None,
                     M_delta: float | None = None) -> ScheduleConstants:
    """Midpoint policy for (C1)-(C3); ``N_bar`` is only known per segment.

    ``N_bar_c4`` is the strict lower bound of (C4); ``N_bar_floor`` is half
    of it and is used as a warning level.
    """
    a, b = map(float, interval if interval is not None else sdc.interval)
    M = float(M_delta if M_delta is not None else sdc.M_delta)
    alpha, eps = sdc.alpha, sdc.eps
    if not alpha > eps:
        raise ContractionError(f"(C1) infeasible: alpha={alpha:.4g} <= eps={eps:.4g}",
                               stage="constants")
    upper = min(alpha - eps, sdc.a_bar + abs(a) + M + sdc.eps_bar)
    if not upper > 0:
        raise ContractionError(f"(C1) infeasible: min bound {upper:.4g} <= 0", stage="constants")
    N = 0.5 * upper
    p = 1.0 + max(sdc.log_K, sdc.log_beta)
    xi_bar = -max(sdc.eps_bar, eps) - 0.1
    xi = -xi_bar + 0.1
    c4 = max(-(alpha - eps), -(eps + (b - a) + 2 * M))
    consts = ScheduleConstants(N, xi, p, xi_bar, -p, 0.5 * c4, c4)
    bad = check_conditions(consts, sdc, (a, b), M)
    if bad:
        raise ContractionError(f"constant selection violates {bad}", stage="constants")
    return consts


def check_conditions(c: ScheduleConstants, sdc: ScalarDichotomyConstants, interval,
                     M_delta: float, N_bars=()) -> list[str]:
    """Names of the violated conditions among (C1)-(C4)."""
    a, b = interval
    out = []
    if not 0 < c.N < min(sdc.alpha - sdc.eps, sdc.a_bar + abs(a) + M_delta + sdc.eps_bar):
        out.append("C1")
    if not max(sdc.log_K, sdc.log_beta) < c.p == -c.p_bar:
        out.append("C2")
    if not 0 <= max(sdc.eps_bar, sdc.eps) <= -c.xi_bar <= c.xi:
        out.append("C3")
    if any(not nb > c.N_bar_c4 for nb in N_bars):
        out.append("C4")
    return out


# ------------------------------------------------------------- schedule

_SCAN = 0.01
_XTOL = 1e-10


def _first_crossing(g, t0: float, T: float):
    """First ``t > t0`` with ``g(t) = 0`` given ``g(t0) < 0``; ``None`` if none."""
    grid = np.arange(t0, T, _SCAN)
    grid = np.r_[grid, T] if grid[-1] < T else grid
    vals = g(grid)
    hit = np.flatnonzero(vals[1:] >= 0)
    if hit.size == 0:
        return None
    k = hit[0]
    lo, hi = grid[k], grid[k + 1]
    if vals[k + 1] == 0:
        return float(hi)
    return float(optimize.brentq(lambda x: float(g(np.array([x]))[0]), lo, hi,
                                 xtol=_XTOL, rtol=4 * np.finfo(float).eps))


@dataclass
class CrossingSchedule:
    """Alternating switch times and the piecewise ``c``, ``lambda``.

    ``times`` starts with 0; segment ``q`` is ``[times[q], times[q+1])`` and
    uses ``(a, -M)`` for even ``q`` and ``(b, +M)`` for odd ``q``.  The last
    entry of ``times`` is the horizon when the final crossing was not
    reached (``partial``).
    """

    interval: tuple
    M_delta: float
    constants: ScheduleConstants
    sdc: ScalarDichotomyConstants
    times: np.ndarray
    N_bars: list
    horizon: float
    partial: bool
    upsilon: float = 0.0
    Delta_bar: float = 0.0
    flags: list = field(default_factory=list)
    integral: CumulativeIntegral | None = None

    @property
    def crossings(self) -> np.ndarray:
        """Switch times strictly inside the horizon."""
        end = -1 if self.partial else None
        return np.asarray(self.times[1:end], float)

    @property
    def T_last(self) -> float:
        c = self.crossings
        return float(c[-1]) if c.size else 0.0

    def segment(self, t) -> np.ndarray:
        t = np.asarray(t, float)
        return np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, len(self.times) - 2)

    def c(self, t) -> np.ndarray:
        a, b = self.interval
        return np.where(self.segment(t) % 2 == 0, a, b)

    def lam(self, t) -> np.ndarray:
        return np.where(self.segment(t) % 2 == 0, -self.M_delta, self.M_delta)

    def step_integral(self, t) -> np.ndarray:
        """``int_0^t (c + lambda)`` (exact for the step function)."""
        t = np.asarray(t, float)
        a, b = self.interval
        M = self.M_delta
        vals = np.array([a - M if q % 2 == 0 else b + M for q in range(len(self.times) - 1)])
        cum = np.r_[0.0, np.cumsum(vals * np.diff(self.times))]
        k = self.segment(t)
        return cum[k] + vals[k] * (t - self.times[k])

    def log_mu_step(self, t) -> np.ndarray:
        return self.integral(t) - self.step_integral(t)

    def gap_bounds(self):
        """The two Step-3 lower bounds: one odd value and one per even gap."""
        s, c = self.sdc, self.constants
        a, b = self.interval
        M = self.M_delta
        odd = (c.p - s.log_K) / (s.a_bar + abs(a) + M + s.eps_bar - c.N)
        even = [(-c.p_bar - s.log_beta) / (s.eps + (b - a) + 2 * M + nb) for nb in self.N_bars]
        return odd, even

    def gap_violations(self) -> list[dict]:
        """Complete gaps that fall short of their closed-form lower bound."""
        odd, even = self.gap_bounds()
        cr = np.r_[0.0, self.crossings]
        out = []
        for q in range(cr.size - 1):
            gap = cr[q + 1] - cr[q]
            bound = odd if q % 2 == 0 else even[q // 2]
            if not (bound > 0 and gap >= bound * (1 - 1e-9)):
                out.append({"segment": q, "gap": float(gap), "bound": float(bound)})
        return out

    def as_dict(self) -> dict:
        odd, even = self.gap_bounds()
        return {"interval": list(self.interval), "M_delta": self.M_delta,
                "constants": self.constants.as_dict(), "scalar": self.sdc.as_dict(),
                "crossing_times": self.crossings.tolist(), "N_bars": list(self.N_bars),
                "partial": self.partial, "T_last": self.T_last, "horizon": self.horizon,
                "upsilon": self.upsilon, "Delta_bar": self.Delta_bar,
                "gap_bound_odd": odd, "gap_bounds_even": even, "flags": list(self.flags)}


def build_crossing_schedule(d_rr: LinearSystem, sdc: ScalarDichotomyConstants,
                            constants: ScheduleConstants, horizon: float | None = None, *,
                            integral: CumulativeIntegral | None = None,
                            n_check: int = 20001) -> CrossingSchedule:
    """Alternate first-crossing searches for the odd and even switch times.

    Odd times solve ``Phi(t, T_2q) = N (t - T_2q) + xi T_2q + p`` with
    ``Phi(t, s) = int_s^t (d - (a - M))``; even times are the first ``w``
    with ``Psi(w, T_2q+1) = -N (T_2q+1 - T_2q) - xi T_2q+1 - p`` and
    ``Psi(t, s) = int_s^t (d - (b + M))``.  ``N_bar`` is the slope through
    ``xi_bar T_2q+1 + p_bar`` and that target.
    """
    a, b = sdc.interval
    M = sdc.M_delta
    c = constants
    T = float(horizon if horizon is not None else d_rr.horizon)
    F = integral or CumulativeIntegral(_scalar_function(d_rr), T)
    times, N_bars, flags = [0.0], [], []
    partial = False
    while True:
        s = times[-1]
        Fs = float(F(np.array([s]))[0])
        if len(times) % 2 == 1:
            def g(t, s=s, Fs=Fs):
                return (F(t) - Fs - (a - M) * (t - s)) - (c.N * (t - s) + c.xi * s + c.p)
        else:
            t_prev = times[-2]
            target = -c.N * (s - t_prev) - c.xi * s - c.p

            def g(t, s=s, Fs=Fs, target=target):
                return target - (F(t) - Fs - (b + M) * (t - s))
        if s >= T:
            partial = False
            break
        nxt = _first_crossing(g, s, T)
        if nxt is None or nxt >= T:
            times.append(T)
            partial = True
            break
        if len(times) % 2 == 0:
            t_prev = times[-2]
            target = -c.N * (s - t_prev) - c.xi * s - c.p
            nb = (target - (c.xi_bar * s + c.p_bar)) / (nxt - s)
            if nb > 0:
                raise ContractionError(f"N_bar={nb:.4g} > 0 on segment ending at {nxt:.6g}",
                                       t=nxt, stage="schedule")
            if not nb > c.N_bar_c4:
                raise ContractionError(f"(C4) violated: N_bar={nb:.4g} <= {c.N_bar_c4:.4g}",
                                       t=nxt, stage="schedule")
            if not nb > c.N_bar_floor and "below_floor" not in flags:
                flags.append("below_floor")
            N_bars.append(float(nb))
        times.append(nxt)
    if partial:
        flags.append("partial")
    sched = CrossingSchedule((a, b), M, c, sdc, np.asarray(times), N_bars, T, partial,
                             flags=flags, integral=F)
    worst_nb = min(N_bars) if N_bars else 0.0
    sched.upsilon = max(2 * (sdc.eps + c.N + c.xi), 2 * (sdc.eps - worst_nb - c.xi_bar))
    grid = np.linspace(0.0, T, n_check)
    ell = sched.log_mu_step(grid)
    sched.Delta_bar = float(max(0.0, np.max(np.abs(ell) - sched.upsilon * grid)))
    return sched


# ------------------------------------------------------------ smoothing

class PiecewiseLinear:
    """Continuous piecewise-linear function with exact running integral."""

    def __init__(self, knots, values):
        self.x = np.asarray(knots, float)
        self.y = np.asarray(values, float)
        self.cum = np.r_[0.0, np.cumsum(0.5 * (self.y[1:] + self.y[:-1]) * np.diff(self.x))]

    def __call__(self, t) -> np.ndarray:
        return np.interp(np.asarray(t, float), self.x, self.y)

    def integral(self, t) -> np.ndarray:
        t = np.asarray(t, float)
        k = np.clip(np.searchsorted(self.x, t, side="right") - 1, 0, self.x.size - 2)
        return self.cum[k] + 0.5 * (self.y[k] + self(t)) * (t - self.x[k])


@dataclass
class SmoothedSchedule:
    """Ramped ``c_bar`` and ``lambda_bar`` replacing the jumps of a schedule."""

    schedule: CrossingSchedule
    c_bar: PiecewiseLinear
    lam_bar: PiecewiseLinear
    widths: np.ndarray
    discrepancy: float

    @property
    def total(self) -> PiecewiseLinear:
        s = self.c_bar
        return PiecewiseLinear(s.x, s.y + self.lam_bar(s.x))

    def log_mu(self, t) -> np.ndarray:
        """``int_0^t (d - c_bar - lambda_bar)``."""
        t = np.asarray(t, float)
        return self.schedule.integral(t) - self.c_bar.integral(t) - self.lam_bar.integral(t)


def smooth_schedule(sched: CrossingSchedule) -> SmoothedSchedule:
    """Linear ramps of half-width ``min(gap/4, 1/(4 J h))`` at every switch."""
    a, b = sched.interval
    M = sched.M_delta
    T = sched.horizon
    jumps = sched.crossings
    J = jumps.size
    height = (b - a) + 2 * M
    if J == 0:
        x = np.array([0.0, T])
        c_bar = PiecewiseLinear(x, [a, a])
        lam_bar = PiecewiseLinear(x, [-M, -M])
        return SmoothedSchedule(sched, c_bar, lam_bar, np.zeros(0), 0.0)
    bounds = np.r_[0.0, jumps, T]
    gaps = np.diff(bounds)
    near = np.minimum(gaps[:-1], gaps[1:])
    cap = 1.0 / (4 * J * height) if height > 0 else np.inf
    w = np.minimum(near / 4.0, cap)
    if np.any(w <= 0):
        raise ContractionError("zero-width ramp: switch times coincide", stage="smoothing")
    knots, cv, lv = [0.0], [a], [-M]
    for q, (tq, wq) in enumerate(zip(jumps, w)):
        before = (a, -M) if q % 2 == 0 else (b, M)
        after = (b, M) if q % 2 == 0 else (a, -M)
        knots += [tq - wq, tq + wq]
        cv += [before[0], after[0]]
        lv += [before[1], after[1]]
    last = (a, -M) if J % 2 == 0 else (b, M)
    knots.append(T)
    cv.append(last[0])
    lv.append(last[1])
    knots = np.asarray(knots)
    if np.any(np.diff(knots) < 0):
        raise ContractionError("smoothing ramps overlap", stage="smoothing")
    c_bar = PiecewiseLinear(knots, cv)
    lam_bar = PiecewiseLinear(knots, lv)
    disc = float(np.sum(w * height / 2.0))
    return SmoothedSchedule(sched, c_bar, lam_bar, w, disc)
