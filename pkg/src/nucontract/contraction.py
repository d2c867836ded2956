"""Nonuniform contraction: diagonal-plus-small form and its certificate."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate
from scipy.sparse.csgraph import connected_components

from .errors import ContractionError, NucontractError
from .schedule import (
    CONTRACTION_PLAN,
    CumulativeIntegral,
    ScalarDichotomyConstants,
    SmoothedSchedule,
    build_crossing_schedule,
    scalar_dichotomy_constants,
    select_constants,
    smooth_schedule,
)
from .spectrum import SpectrumResult, SweepPlan, compute_spectrum
from .sysmodel import CallableMatrix, LinearSystem, MatrixFunction
from .triangular import KinematicTransform, TriangularSystem, _rate_knee, triangularize

__all__ = [
    "ContractionParams",
    "ChannelResult",
    "BlockResult",
    "ContractionOutput",
    "Certificate",
    "build_L",
    "contract_block",
    "contract_system",
    "certify",
    "find_blocks",
    "scalar_dichotomy_constants",
    "select_constants",
    "build_crossing_schedule",
    "smooth_schedule",
]


@dataclass(frozen=True)
class ContractionParams:
    """``M_delta = delta / m`` and ``K_delta = max(1, 1 / M_delta)``."""

    delta: float
    m: int
    M_delta: float
    K_delta: float

    @classmethod
    def from_delta(cls, delta: float, m: int, K_delta: float | None = None):
        if not delta > 0:
            raise ContractionError("delta must be positive")
        if m < 1:
            raise ContractionError("the spectrum must contain at least one interval")
        M = delta / m
        K = max(1.0, 1.0 / M) if K_delta is None else float(K_delta)
        if K * M < 1 - 1e-12:
            raise ContractionError("K_delta * M_delta must be at least 1")
        return cls(float(delta), int(m), M, K)


@dataclass
class ChannelResult:
    index: int
    interval: tuple
    sdc: ScalarDichotomyConstants
    smoothed: SmoothedSchedule

    @property
    def schedule(self):
        return self.smoothed.schedule

    def as_dict(self) -> dict:
        out = self.schedule.as_dict()
        out.update(index=self.index, smoothing_discrepancy=self.smoothed.discrepancy,
                   ramp_widths=self.smoothed.widths.tolist())
        return out


@dataclass(eq=False)
class BlockResult:
    """One block: ``T = S L R`` and ``T^-1 A T - T^-1 T' = C_bar + B_bar``."""

    indices: tuple
    S: KinematicTransform
    U: TriangularSystem
    channels: list
    params: ContractionParams
    K1: float
    kappa1: float
    K2: float
    kappa2: float
    eta: float
    Omega: float
    upsilon: float

    @property
    def n(self) -> int:
        return len(self.indices)

    @property
    def kappa(self) -> float:
        return self.kappa1 + self.kappa2

    @property
    def rate(self) -> float:
        """``kappa M_delta K_delta``: the scaling rate of ``R``."""
        return self.kappa * self.params.M_delta * self.params.K_delta

    @property
    def K_delta_eps(self) -> float:
        return 2.0 + self.n * self.kappa * self.params.K_delta

    def log_mu(self, t) -> np.ndarray:
        t = np.asarray(t, float)
        return np.stack([ch.smoothed.log_mu(t) for ch in self.channels], axis=-1)

    def log_scale(self, t) -> np.ndarray:
        """``g_r = ln mu_r + (r-1) ln eta - r kappa M K t`` (1-based ``r``)."""
        t = np.asarray(t, float)
        r = np.arange(1, self.n + 1)
        return (self.log_mu(t) + (r - 1) * math.log(self.eta)
                - r * self.rate * t[..., None])

    def c_bar(self, t) -> np.ndarray:
        t = np.asarray(t, float)
        return np.stack([ch.smoothed.c_bar(t) for ch in self.channels], axis=-1)

    def lam_bar(self, t) -> np.ndarray:
        t = np.asarray(t, float)
        return np.stack([ch.smoothed.lam_bar(t) for ch in self.channels], axis=-1)

    def C(self, t) -> np.ndarray:
        c = self.c_bar(t)
        return c[..., :, None] * np.eye(self.n)

    def B(self, t) -> np.ndarray:
        t = np.asarray(t, float)
        n = self.n
        g = self.log_scale(t)
        out = np.zeros(t.shape + (n, n))
        if n > 1:
            Uv = self.U(t)
            iu = np.triu_indices(n, 1)
            expo = g[..., iu[1]] - g[..., iu[0]]
            out[..., iu[0], iu[1]] = Uv[..., iu[0], iu[1]] * np.exp(expo)
        diag = self.lam_bar(t) + np.arange(1, n + 1) * self.rate
        out[..., np.arange(n), np.arange(n)] = diag
        return out

    def as_dict(self) -> dict:
        return {"indices": list(self.indices), "n": self.n, "K1": self.K1,
                "kappa1": self.kappa1, "K2": self.K2, "kappa2": self.kappa2,
                "kappa": self.kappa, "eta": self.eta, "Omega": self.Omega,
                "upsilon": self.upsilon, "K_delta_eps": self.K_delta_eps,
                "transform": {"kind": self.S.kind, "upsilon": self.S.upsilon,
                              "M_upsilon": self.S.M_upsilon},
                "channels": [ch.as_dict() for ch in self.channels]}


@dataclass(eq=False)
class ContractionOutput:
    system: LinearSystem
    params: ContractionParams
    spectrum: SpectrumResult
    blocks: list
    B_scale: float = 1.0

    @property
    def n(self) -> int:
        return self.system.dim

    @property
    def horizon(self) -> float:
        return self.system.horizon

    @property
    def K_delta_eps(self) -> float:
        return max(b.K_delta_eps for b in self.blocks)

    @property
    def kappa(self) -> float:
        return max(b.kappa for b in self.blocks)

    @property
    def eta(self) -> float:
        return min(b.eta for b in self.blocks)

    @property
    def T_last(self) -> float:
        return min(ch.schedule.T_last for b in self.blocks for ch in b.channels)

    def _assemble(self, t, fn) -> np.ndarray:
        t = np.asarray(t, float)
        out = np.zeros(t.shape + (self.n, self.n))
        for blk in self.blocks:
            idx = np.asarray(blk.indices)
            out[..., idx[:, None], idx[None, :]] = fn(blk, t)
        return out

    def C(self, t) -> np.ndarray:
        return self._assemble(t, lambda b, t: b.C(t))

    def B(self, t) -> np.ndarray:
        return self.B_scale * self._assemble(t, lambda b, t: b.B(t))

    def corrupted(self, factor: float = 10.0) -> "ContractionOutput":
        """Copy whose ``B`` is scaled by ``factor`` (negative control)."""
        return ContractionOutput(self.system, self.params, self.spectrum, self.blocks,
                                 self.B_scale * factor)

    def transform_bound(self):
        """``(M_T, upsilon_T)`` with ``|T|, |T^-1| <= M_T exp(upsilon_T t)``."""
        M_T, ups = 1.0, 0.0
        for b in self.blocks:
            m = b.S.M_upsilon * b.Omega * b.eta ** (-(b.n - 1))
            u = b.S.upsilon + b.upsilon + b.n * b.rate
            M_T, ups = max(M_T, m), max(ups, u)
        return M_T, ups

    def as_dict(self) -> dict:
        M_T, ups = self.transform_bound()
        return {
            "delta": self.params.delta, "m": self.params.m, "M_delta": self.params.M_delta,
            "K_delta": self.params.K_delta, "kappa": self.kappa, "eta": self.eta,
            "K_delta_eps": self.K_delta_eps, "bound": self.params.delta * self.K_delta_eps,
            "transform_bound": {"M": M_T, "upsilon": ups},
            "horizon": self.horizon, "T_last": self.T_last,
            "spectrum": self.spectrum.as_dict(),
            "blocks": [b.as_dict() for b in self.blocks],
        }


# --------------------------------------------------------------- pipeline

def find_blocks(A) -> list[tuple]:
    """Index sets of the connected components of the structural pattern."""
    mask = A.structural_nonzero()
    mask = mask | mask.T
    k, labels = connected_components(mask.astype(int), directed=False)
    blocks = [tuple(int(i) for i in np.flatnonzero(labels == c)) for c in range(k)]
    return sorted(blocks)


def _sub_system(system: LinearSystem, idx) -> LinearSystem:
    A = system.A
    if len(idx) == system.dim:
        return system
    if isinstance(A, MatrixFunction):
        sub = A.block(idx)
    else:
        ix = np.asarray(idx)
        sub = CallableMatrix(len(idx), lambda t: A(t)[..., ix[:, None], ix[None, :]],
                             A.envelope, f"block {list(idx)}")
    return LinearSystem(sub, system.horizon, label=f"{system.label}{list(idx)}")


def _off_diagonal_envelope(U: TriangularSystem, grid):
    n = U.dim
    if n == 1:
        return 0.0, 0.0
    vals = np.abs(U(grid)[..., np.triu_indices(n, 1)[0], np.triu_indices(n, 1)[1]])
    peak = np.max(vals, axis=-1)
    if not np.any(peak > 0):
        return 0.0, 0.0
    logs = np.log(np.maximum(peak, 1e-300))
    k1 = _rate_knee(grid, logs)
    return float(np.exp(np.max(logs - k1 * grid))), float(k1)


def _channel_interval(d_rr: LinearSystem, spectrum: SpectrumResult, M: float, plan):
    """Try the spectral intervals nearest to the channel's mean first."""
    F = CumulativeIntegral(lambda t: d_rr.A(t)[..., 0, 0], d_rr.horizon)
    mean = float(F(np.array([d_rr.horizon]))[0]) / d_rr.horizon
    dist = [max(0.0, a - mean, mean - b) for a, b in spectrum.intervals]
    order = np.argsort(dist)
    errors = []
    for i in order:
        iv = spectrum.intervals[int(i)]
        try:
            return iv, scalar_dichotomy_constants(d_rr, iv, M, plan=plan), F
        except ContractionError as exc:
            errors.append(f"{tuple(round(x, 4) for x in iv)}: {exc}")
    raise ContractionError("no spectral interval contains the diagonal channel: "
                           + "; ".join(errors), stage="step2")


def build_L(smoothed, *, grid=None) -> KinematicTransform:
    """Diagonal ``L = diag(mu_r)`` with ``mu_r = exp(int (d - c_bar - lambda_bar))``.

    The bound ``|L|, |L^-1| <= Omega exp(upsilon t)`` with
    ``Omega = exp(max Delta_bar + 1)`` is verified on ``grid``.
    """
    smoothed = list(smoothed)
    n = len(smoothed)
    T = smoothed[0].schedule.horizon
    upsilon = max(sm.schedule.upsilon for sm in smoothed)
    Omega = math.exp(max(sm.schedule.Delta_bar for sm in smoothed) + 1.0)

    def logs(t):
        t = np.asarray(t, float)
        return np.stack([sm.log_mu(t) for sm in smoothed], axis=-1)

    def rates(t):
        t = np.asarray(t, float)
        return np.stack([sm.schedule.integral.f(t) - sm.total(t) for sm in smoothed], axis=-1)

    def diag(v):
        out = np.zeros(v.shape + (n,))
        idx = np.arange(n)
        out[..., idx, idx] = v
        return out

    L = KinematicTransform(n, lambda t: diag(np.exp(logs(t))),
                           lambda t: diag(np.exp(logs(t)) * rates(t)), "diagonal", T,
                           upsilon, Omega, S_inv=lambda t: diag(np.exp(-logs(t))))
    grid = np.linspace(0.0, T, 4001) if grid is None else np.asarray(grid, float)
    excess = np.max(np.abs(logs(grid)), axis=-1) - (math.log(Omega) + upsilon * grid)
    if np.max(excess) > 1e-9:
        k = int(np.argmax(excess))
        raise ContractionError(f"|ln mu| exceeds ln Omega + upsilon t by {excess[k]:.3g}",
                               t=float(grid[k]), stage="build_L")
    return L


def contract_block(S: KinematicTransform, U: TriangularSystem, spectrum: SpectrumResult,
                   params: ContractionParams, *, indices=None, plan=None,
                   n_check: int = 4001) -> BlockResult:
    """Steps 2-4 on one triangular block."""
    plan = plan or CONTRACTION_PLAN
    n, T = U.dim, U.horizon
    M = params.M_delta
    channels = []
    for r in range(n):
        d_rr = U.diagonal(r)
        try:
            iv, sdc, F = _channel_interval(d_rr, spectrum, M, plan)
            consts = select_constants(sdc)
            sched = build_crossing_schedule(d_rr, sdc, consts, T, integral=F)
            sm = smooth_schedule(sched)
        except NucontractError as exc:
            raise ContractionError(f"channel {r}: {exc}", t=exc.t,
                                   stage=exc.stage or "channel") from exc
        channels.append(ChannelResult(r, tuple(iv), sdc, sm))
    grid = np.linspace(0.0, T, n_check)
    L = build_L([ch.smoothed for ch in channels], grid=grid)
    upsilon, Omega = L.upsilon, L.M_upsilon
    K1, kappa1 = _off_diagonal_envelope(U, grid)
    K2, kappa2 = Omega ** 2, 2.0 * upsilon
    eta = 0.5 * M / (M + K1 * K2)
    blk = BlockResult(tuple(indices if indices is not None else range(n)), S, U, channels,
                      params, K1, kappa1, K2, kappa2, eta, Omega, upsilon)
    # Step 4 norm bound on the block's own grid
    norms = np.linalg.norm(blk.B(grid), 2, axis=(-2, -1))
    bound = M * blk.K_delta_eps
    if np.max(norms) > bound * (1 + 1e-12):
        k = int(np.argmax(norms))
        raise ContractionError(f"|B_bar| = {norms[k]:.6g} exceeds (delta/m) K = {bound:.6g}",
                               t=float(grid[k]), stage="step4")
    return blk


def contract_system(system: LinearSystem, delta: float, *,
                    spectrum: SpectrumResult | None = None,
                    sweep: SweepPlan | None = None, plan=None) -> ContractionOutput:
    """Spectrum, block split, triangularisation and per-block contraction."""
    if spectrum is None:
        spectrum = compute_spectrum(system, sweep)
    params = ContractionParams.from_delta(delta, spectrum.m)
    blocks = []
    for idx in find_blocks(system.A):
        sub = _sub_system(system, idx)
        try:
            S, U = triangularize(sub)
        except NucontractError as exc:
            raise ContractionError(f"block {list(idx)}: {exc}", t=exc.t,
                                   stage="triangularize") from exc
        blocks.append(contract_block(S, U, spectrum, params, indices=idx, plan=plan))
    return ContractionOutput(system, params, spectrum, blocks)


# ------------------------------------------------------------ certificate

@dataclass
class Clause:
    name: str
    passed: bool
    worst_t: float | None
    margin: float
    detail: str = ""

    def as_dict(self) -> dict:
        return {"name": self.name, "pass": bool(self.passed), "worst_t": self.worst_t,
                "margin": self.margin, "detail": self.detail}


@dataclass
class Certificate:
    delta: float
    clauses: list
    window: tuple
    T_last: float
    constants: dict = field(default_factory=dict)
    checks: dict = field(default_factory=dict)
    crossing_times: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.clauses)

    def clause(self, name: str) -> Clause:
        for c in self.clauses:
            if c.name == name:
                return c
        raise KeyError(name)

    def as_dict(self) -> dict:
        out = {"delta": self.delta, "pass": self.passed}
        out.update(self.constants)
        out.update({
            "clauses": [c.as_dict() for c in self.clauses],
            "certified_window": list(self.window), "T_last": self.T_last,
            "crossing_times": self.crossing_times, "checks": self.checks,
        })
        return out


def _fresh_grid(T: float, n: int) -> np.ndarray:
    # offset by an irrational fraction so no point sits on a pipeline grid
    h = T / (n - 1)
    g = np.arange(n) * h + h * (math.sqrt(2) - 1)
    return np.r_[0.0, g[g < T], T]


def _independent_log_mu(d, c_bar, lam_bar, t_points, knots) -> np.ndarray:
    """``int_0^t (d - c_bar - lam_bar)`` by adaptive quadrature between breakpoints."""
    t_points = np.asarray(t_points, float)
    cuts = np.unique(np.r_[knots, t_points])
    vals = np.empty(cuts.size - 1)

    def f(x):
        return float(d(np.array([x]))[0] - c_bar(x) - lam_bar(x))

    for k in range(cuts.size - 1):
        a, b = cuts[k], cuts[k + 1]
        pieces = max(1, int(math.ceil((b - a) / 1.0)))
        edges = np.linspace(a, b, pieces + 1)
        vals[k] = sum(integrate.quad(f, edges[j], edges[j + 1], epsabs=1e-12,
                                     epsrel=1e-12, limit=200)[0] for j in range(pieces))
    cum = np.r_[0.0, np.cumsum(vals)]
    return cum[np.searchsorted(cuts, t_points)]


def certify(output: ContractionOutput, delta: float | None = None,
            spectrum: SpectrumResult | None = None, *, n_points: int = 20001,
            n_integral: int = 101) -> Certificate:
    """Re-check the contraction claims on a fresh grid.

    Clauses: (i) ``C(t)`` within the endpoint tolerance of ``Sigma(A)``;
    (ii) ``|B(t)| <= delta K_{delta,eps}``; (iii) ``|T|, |T^-1| <=
    M_T exp(upsilon_T t)``; (iv) the similarity residual, recomputed from
    ``A`` and ``S`` together with an independent quadrature of ``ln mu``.
    """
    delta = output.params.delta if delta is None else float(delta)
    spectrum = spectrum or output.spectrum
    system = output.system
    T = system.horizon
    grid = _fresh_grid(T, n_points)
    tol = spectrum.tolerance
    clauses = []

    # (i)
    C = output.C(grid)
    diag = np.diagonal(C, axis1=-2, axis2=-1)
    dist = spectrum.distance(diag.ravel()).reshape(diag.shape).max(axis=-1)
    k = int(np.argmax(dist))
    clauses.append(Clause("C_in_spectrum", bool(dist[k] <= tol), float(grid[k]),
                          float(tol - dist[k]), f"max distance {dist[k]:.3g}, tolerance {tol}"))

    # (ii)
    bound = delta * output.K_delta_eps
    norms = np.linalg.norm(output.B(grid), 2, axis=(-2, -1))
    k = int(np.argmax(norms))
    clauses.append(Clause("B_small", bool(norms[k] <= bound * (1 + 1e-12)), float(grid[k]),
                          float(bound - norms[k]), f"max |B| {norms[k]:.6g}, bound {bound:.6g}"))

    # (iii)
    M_T, ups_T = output.transform_bound()
    worst, worst_t = math.inf, None
    for blk in output.blocks:
        g = blk.log_scale(grid)
        Sv = blk.S.S(grid)
        gmax = g.max(axis=-1, keepdims=True)
        gmin = g.min(axis=-1, keepdims=True)
        fwd = np.log(np.linalg.norm(Sv * np.exp(g - gmax)[..., None, :], 2, axis=(-2, -1)))
        fwd = fwd + gmax[..., 0]
        Sinv = blk.S.inverse(grid)
        inv = np.log(np.linalg.norm(np.exp(gmin - g)[..., :, None] * Sinv, 2, axis=(-2, -1)))
        inv = inv - gmin[..., 0]
        slack = math.log(M_T) + ups_T * grid - np.maximum(fwd, inv)
        j = int(np.argmin(slack))
        if slack[j] < worst:
            worst, worst_t = float(slack[j]), float(grid[j])
    clauses.append(Clause("transform_bounds", bool(worst >= -1e-9), worst_t, worst,
                          f"ln M_T={math.log(M_T):.6g}, upsilon_T={ups_T:.6g}"))

    # (iv)
    res, res_t = 0.0, None
    ell_err = 0.0
    A = system.A
    for blk in output.blocks:
        idx = np.asarray(blk.indices)
        Ab = A(grid)[..., idx[:, None], idx[None, :]]
        Sv, Sinv, Sd = blk.S.S(grid), blk.S.inverse(grid), blk.S.S_dot(grid)
        core = Sinv @ Ab @ Sv - Sinv @ Sd
        g = blk.log_scale(grid)
        n = blk.n
        # T^-1 A T - T^-1 T' with T = S diag(exp g): off-diagonal part
        expo = g[..., None, :] - g[..., :, None]
        with np.errstate(over="ignore", invalid="ignore"):
            off = np.where(np.eye(n, dtype=bool), 0.0, core * np.exp(expo))
        # diagonal: core_rr - g'_r with g'_r = d_rr - c_bar - lam_bar - r kappa M K
        rate = np.arange(1, n + 1) * blk.rate
        dg = np.diagonal(core, axis1=-2, axis2=-1) - blk.c_bar(grid) - blk.lam_bar(grid) - rate
        lhs = off + (np.diagonal(core, axis1=-2, axis2=-1) - dg)[..., None] * np.eye(n)
        rhs = output.C(grid)[..., idx[:, None], idx[None, :]] + \
            output.B(grid)[..., idx[:, None], idx[None, :]]
        diff = np.linalg.norm(lhs - rhs, 2, axis=(-2, -1)) / np.maximum(
            1.0, np.linalg.norm(rhs, 2, axis=(-2, -1)))
        diff = np.where(np.isfinite(diff), diff, np.inf)
        j = int(np.argmax(diff))
        if diff[j] > res:
            res, res_t = float(diff[j]), float(grid[j])
        # ln mu against independent quadrature of the raw diagonal
        sample = np.linspace(0.0, T, n_integral)
        for ch in blk.channels:
            r = ch.index
            d = (lambda t, r=r: blk.U(t)[..., r, r])
            knots = ch.smoothed.c_bar.x
            ref = _independent_log_mu(d, ch.smoothed.c_bar, ch.smoothed.lam_bar, sample, knots)
            err = float(np.max(np.abs(ch.smoothed.log_mu(sample) - ref)))
            ell_err = max(ell_err, err)
    worst = max(res, ell_err)
    clauses.append(Clause("similarity_residual", bool(worst <= 1e-6), res_t, float(1e-6 - worst),
                          f"algebraic {res:.3g}, integral {ell_err:.3g}"))

    checks = {"gap_violations": [], "smoothing_discrepancy": 0.0, "flags": []}
    crossing = {}
    for blk in output.blocks:
        for ch in blk.channels:
            key = f"{blk.indices[ch.index]}"
            crossing[key] = ch.schedule.crossings.tolist()
            for v in ch.schedule.gap_violations():
                checks["gap_violations"].append(dict(v, channel=key))
            checks["smoothing_discrepancy"] = max(checks["smoothing_discrepancy"],
                                                  ch.smoothed.discrepancy)
            checks["flags"] += [f"{key}:{f}" for f in ch.schedule.flags + list(ch.sdc.flags)]
    consts = {"M_delta": output.params.M_delta, "K_delta": output.params.K_delta,
              "kappa": output.kappa, "eta": output.eta, "K_delta_eps": output.K_delta_eps}
    return Certificate(delta, clauses, (0.0, T), output.T_last, consts, checks, crossing)
