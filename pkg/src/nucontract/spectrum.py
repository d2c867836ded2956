"""Dichotomy spectrum as a finite union of closed intervals."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .dichotomy import DichotomyPlan, DichotomyVerdict, operator_for, test_dichotomy
from .errors import SpectrumError
from .flow import GrowthEstimate, fit_growth

__all__ = [
    "SweepPlan",
    "SpectrumResult",
    "bracket",
    "compute_spectrum",
    "union_block_spectrum",
]


def bracket(growth: GrowthEstimate) -> tuple[float, float]:
    """Shifts beyond ``+-(a + eps_bar + 1)`` lie in the resolvent."""
    h = growth.a + growth.eps_bar + 1.0
    return -h, h


@dataclass(frozen=True)
class SweepPlan:
    """``n_coarse`` grid cells over the bracket; endpoints refined to ``tol``."""

    n_coarse: int = 32
    tol: float = 0.05
    dichotomy: DichotomyPlan = field(default_factory=DichotomyPlan)
    n_jobs: int = 1
    bracket: tuple | None = None


@dataclass
class SpectrumResult:
    """Sorted disjoint intervals with the sampled verdicts behind them.

    ``enclosures[i]`` holds ``((r_lo, s_lo), (s_hi, r_hi))``: each endpoint
    lies between a resolvent sample ``r`` and a spectral sample ``s``.
    Membership of the endpoints themselves is not decided.
    """

    intervals: list
    samples: list
    tolerance: float
    enclosures: list = field(default_factory=list)
    interval_flags: list = field(default_factory=list)
    flags: list = field(default_factory=list)
    ranks: list = field(default_factory=list)
    growth: GrowthEstimate | None = None
    bracket: tuple | None = None

    def __post_init__(self):
        if not self.enclosures:
            self.enclosures = [((a, a), (b, b)) for a, b in self.intervals]
        if not self.interval_flags:
            self.interval_flags = [[] for _ in self.intervals]

    @property
    def m(self) -> int:
        return len(self.intervals)

    def contains(self, lam, tol: float | None = None) -> np.ndarray:
        """Whether ``lam`` lies within ``tol`` of some interval."""
        tol = self.tolerance if tol is None else tol
        lam = np.asarray(lam, float)
        out = np.zeros(lam.shape, bool)
        for a, b in self.intervals:
            out |= (lam >= a - tol) & (lam <= b + tol)
        return out

    def distance(self, lam) -> np.ndarray:
        lam = np.asarray(lam, float)
        dist = np.full(lam.shape, np.inf)
        for a, b in self.intervals:
            dist = np.minimum(dist, np.maximum(0.0, np.maximum(a - lam, lam - b)))
        return dist

    def check_structure(self, n: int | None = None) -> None:
        iv = self.intervals
        for a, b in iv:
            if not a <= b:
                raise SpectrumError(f"interval [{a}, {b}] is reversed")
        for (a1, b1), (a2, b2) in zip(iv, iv[1:]):
            if not b1 < a2:
                raise SpectrumError(f"intervals [{a1}, {b1}] and [{a2}, {b2}] are not disjoint")
        if n is not None and not 1 <= len(iv) <= n:
            raise SpectrumError(f"{len(iv)} intervals for dimension {n}")

    def resolvent_samples(self):
        return [(lam, v) for lam, v in self.samples if v.admits]

    def as_dict(self) -> dict:
        return {
            "intervals": [[float(a), float(b)] for a, b in self.intervals],
            "tolerance": self.tolerance,
            "flags": {
                "global": list(self.flags),
                "intervals": [list(f) for f in self.interval_flags],
            },
            "enclosures": [[list(map(float, lo)), list(map(float, hi))]
                           for lo, hi in self.enclosures],
            "ranks": [list(r) for r in self.ranks],
            "bracket": list(self.bracket) if self.bracket else None,
            "growth": self.growth.as_dict() if self.growth else None,
        }

    def sweep_rows(self):
        rows = []
        for lam, v in sorted(self.samples, key=lambda x: x[0]):
            rows.append((lam, int(v.admits), v.projector_rank, v.alpha, v.eps, v.K))
        return rows


def _evaluate(op, lams, plan: DichotomyPlan, n_jobs: int):
    lams = [float(x) for x in lams]
    if n_jobs == 1 or len(lams) < 2:
        return [test_dichotomy(op, lam, plan) for lam in lams]
    from joblib import Parallel, delayed

    return Parallel(n_jobs=n_jobs, prefer="threads")(
        delayed(test_dichotomy)(op, lam, plan) for lam in lams)


class _Sweep:
    def __init__(self, op, plan: SweepPlan):
        self.op, self.plan = op, plan
        self.samples: dict[float, DichotomyVerdict] = {}

    def test(self, lam: float) -> DichotomyVerdict:
        lam = float(lam)
        if lam not in self.samples:
            self.samples[lam] = test_dichotomy(self.op, lam, self.plan.dichotomy)
        return self.samples[lam]

    def refine_edge(self, lo: float, hi: float):
        """Bisect a resolvent/spectrum transition down to ``tol``."""
        vlo = self.test(lo).admits
        while hi - lo > self.plan.tol:
            mid = 0.5 * (lo + hi)
            if self.test(mid).admits == vlo:
                lo = mid
            else:
                hi = mid
        return lo, hi

    def hunt(self, lo: float, hi: float):
        """Between two resolvent samples of different rank find a spectral one."""
        rlo = self.test(lo).projector_rank
        while hi - lo > self.plan.tol:
            mid = 0.5 * (lo + hi)
            v = self.test(mid)
            if not v.admits:
                return mid, (lo, hi)
            if v.projector_rank == rlo:
                lo = mid
            else:
                hi = mid
        return None, (lo, hi)


def compute_spectrum(system, plan: SweepPlan | None = None) -> SpectrumResult:
    """Sweep the growth bracket and return the spectral intervals."""
    plan = plan or SweepPlan()
    op = operator_for(system)
    n = op.n
    growth = fit_growth(op)
    lo, hi = plan.bracket or bracket(growth)
    sweep = _Sweep(op, plan)
    lams = np.linspace(lo, hi, plan.n_coarse + 1)
    for lam, v in zip(lams, _evaluate(op, lams, plan.dichotomy, plan.n_jobs)):
        sweep.samples[float(lam)] = v
    flags = []
    first, last = sweep.samples[float(lams[0])], sweep.samples[float(lams[-1])]
    if not (first.admits and first.projector_rank == 0 and last.admits
            and last.projector_rank == n):
        flags.append("bracket_edges_not_resolvent")

    # spectral segments as [left_resolvent, left_spectral, right_spectral, right_resolvent]
    pieces = []
    lam_list = [float(x) for x in lams]
    k = 0
    while k < len(lam_list):
        if sweep.samples[lam_list[k]].admits:
            if k + 1 < len(lam_list):
                a, b = lam_list[k], lam_list[k + 1]
                va, vb = sweep.samples[a], sweep.samples[b]
                if vb.admits and va.projector_rank != vb.projector_rank:
                    found, (l2, h2) = sweep.hunt(a, b)
                    if found is None:
                        pieces.append([l2, 0.5 * (l2 + h2), 0.5 * (l2 + h2), h2, "hidden"])
                    else:
                        left = sweep.refine_edge(a, found)
                        right = sweep.refine_edge(found, b)
                        pieces.append([left[0], left[1], right[0], right[1], None])
            k += 1
            continue
        j = k
        while j + 1 < len(lam_list) and not sweep.samples[lam_list[j + 1]].admits:
            j += 1
        left = sweep.refine_edge(lam_list[k - 1], lam_list[k]) if k > 0 else (None, lam_list[k])
        right = sweep.refine_edge(lam_list[j], lam_list[j + 1]) if j + 1 < len(lam_list) \
            else (lam_list[j], None)
        pieces.append([left[0], left[1], right[0], right[1], None])
        k = j + 1

    intervals, enclosures, iflags, ranks = [], [], [], []
    tol = plan.tol
    for r_lo, s_lo, s_hi, r_hi, note in pieces:
        f = [] if note is None else [note]
        a = 0.5 * (r_lo + s_lo) if r_lo is not None else s_lo
        b = 0.5 * (s_hi + r_hi) if r_hi is not None else s_hi
        if r_lo is None or r_hi is None:
            f.append("open_at_bracket")
        if b - a <= 2 * tol:
            c = 0.5 * (a + b)
            a, b = c - tol, c + tol
            f.append("degenerate")
        intervals.append((a, b))
        enclosures.append(((r_lo if r_lo is not None else s_lo, s_lo),
                           (s_hi, r_hi if r_hi is not None else s_hi)))
        iflags.append(f)
        rb = sweep.samples.get(r_lo) if r_lo is not None else None
        ra = sweep.samples.get(r_hi) if r_hi is not None else None
        ranks.append((rb.projector_rank if rb else None, ra.projector_rank if ra else None))
    # degenerate widening may create overlaps; merge those and flag near neighbours
    merged = []
    for item in zip(intervals, enclosures, iflags, ranks):
        if merged and item[0][0] <= merged[-1][0][1]:
            (a0, b0), (e0, _), f0, (rk0, _) = merged[-1]
            (a1, b1), (_, e1), f1, (_, rk1) = item
            merged[-1] = ((a0, max(b0, b1)), (e0, e1), f0 + f1 + ["merged"], (rk0, rk1))
        else:
            merged.append(item)
    for i in range(len(merged) - 1):
        if merged[i + 1][0][0] - merged[i][0][1] < 2 * tol:
            merged[i][2].append("possibly_merged")
            merged[i + 1][2].append("possibly_merged")
    result = SpectrumResult(
        intervals=[m[0] for m in merged],
        samples=sorted(sweep.samples.items()),
        tolerance=tol,
        enclosures=[m[1] for m in merged],
        interval_flags=[m[2] for m in merged],
        flags=flags,
        ranks=[m[3] for m in merged],
        growth=growth,
        bracket=(lo, hi),
    )
    _check_ranks(result, sweep, plan)
    result.samples = sorted(sweep.samples.items())
    if result.m > n:
        raise SpectrumError(f"found {result.m} intervals for dimension {n}")
    result.check_structure(n if result.m else None)
    return result


def _check_ranks(result: SpectrumResult, sweep: _Sweep, plan: SweepPlan) -> None:
    """Resolvent ranks must not decrease with the shift; re-test offenders once."""
    def offenders():
        res = [(lam, v) for lam, v in sorted(sweep.samples.items()) if v.admits]
        bad = []
        for (l1, v1), (l2, v2) in zip(res, res[1:]):
            if v2.projector_rank < v1.projector_rank:
                bad.extend([l1, l2])
        return bad

    bad = offenders()
    if not bad:
        return
    dense = replace(plan.dichotomy, n_pairs=2 * plan.dichotomy.n_pairs,
                    refine_rounds=plan.dichotomy.refine_rounds + 1)
    for lam in set(bad):
        sweep.samples[lam] = test_dichotomy(sweep.op, lam, dense)
    bad = offenders()
    if bad:
        raise SpectrumError(f"projector rank decreases between shifts {bad[:2]}")
    result.flags.append("rank_retest")


def union_block_spectrum(s1: SpectrumResult, s2: SpectrumResult) -> SpectrumResult:
    """Union of two spectra with touching or overlapping intervals merged."""
    items = []
    for s in (s1, s2):
        for iv, enc, f in zip(s.intervals, s.enclosures, s.interval_flags):
            items.append((tuple(iv), enc, list(f)))
    items.sort(key=lambda x: x[0][0])
    merged = []
    for iv, enc, f in items:
        if merged and iv[0] <= merged[-1][0][1]:
            (a0, b0), (e0lo, e0hi), f0 = merged[-1]
            hi_enc = enc[1] if iv[1] >= b0 else e0hi
            merged[-1] = ((a0, max(b0, iv[1])), (e0lo, hi_enc), f0 + f + ["merged"])
        else:
            merged.append((iv, enc, f))
    tol = max(s1.tolerance, s2.tolerance)
    return SpectrumResult(
        intervals=[m[0] for m in merged],
        samples=list(s1.samples) + list(s2.samples),
        tolerance=tol,
        enclosures=[m[1] for m in merged],
        interval_flags=[m[2] for m in merged],
        flags=sorted(set(s1.flags) | set(s2.flags)),
    )
