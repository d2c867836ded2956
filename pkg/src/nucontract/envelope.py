"""Log-linear envelope fits.

Both the bounded-growth fit and the dichotomy fit reduce to the same shape:
given points ``(d_i, w_i, v_i)`` with ``d_i, w_i >= 0`` find a rate ``r``, a
nonuniformity ``e >= 0`` and an intercept ``c`` with

    v_i + sgn * r * d_i - e * w_i <= c      for all i.

For fixed ``(r, e)`` the best intercept is a maximum of linear functions,
so every partial minimisation is a one-dimensional convex problem.  We solve
those by bisection on the subgradient instead of calling an LP solver; the
answers are exact up to the bisection tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import ConvexHull, QhullError

__all__ = ["EnvelopePoints", "prune", "min_over_eps", "fit_decay", "fit_growth_rate"]

EPS_CAP = 50.0
_ITERS = 48


@dataclass
class EnvelopePoints:
    """Columns of the constraint set.  ``v`` is ``ln`` of a norm."""

    d: np.ndarray
    w: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.d = np.asarray(self.d, dtype=float).ravel()
        self.w = np.asarray(self.w, dtype=float).ravel()
        self.v = np.asarray(self.v, dtype=float).ravel()

    def __len__(self):
        return self.v.size

    def concat(self, other: "EnvelopePoints") -> "EnvelopePoints":
        return EnvelopePoints(np.r_[self.d, other.d], np.r_[self.w, other.w], np.r_[self.v, other.v])

    def take(self, idx) -> "EnvelopePoints":
        return EnvelopePoints(self.d[idx], self.w[idx], self.v[idx])


def prune(points: EnvelopePoints) -> np.ndarray:
    """Indices of points that can ever be binding.

    A maximum of a linear functional over the point cloud is attained at a
    vertex of its convex hull, so all other points are redundant for every
    choice of ``(r, e)``.  Shifting ``v`` by a multiple of ``d`` is a shear,
    which keeps the vertex set; callers may therefore prune once and reuse
    the indices for every spectral shift.
    """
    keep = np.isfinite(points.v)
    idx = np.flatnonzero(keep)
    if idx.size <= 8:
        return idx
    cloud = np.c_[points.d[idx], points.w[idx], points.v[idx]]
    try:
        hull = ConvexHull(cloud, qhull_options="QJ Pp")
        verts = np.unique(hull.vertices)
    except (QhullError, ValueError):
        return idx
    return idx[verts]


def min_over_eps(c: np.ndarray, w: np.ndarray, eps_max: float = EPS_CAP) -> tuple[float, float]:
    """Minimise ``max_i(c_i - e w_i)`` over ``e`` in ``[0, eps_max]``.

    Returns ``(value, argmin)``; the argmin is the smallest minimiser.
    """
    if c.size == 0:
        return -np.inf, 0.0

    def f(e):
        return float(np.max(c - e * w))

    lo, hi = 0.0, float(eps_max)
    if hi <= 0:
        return f(0.0), 0.0
    for _ in range(_ITERS):
        mid = 0.5 * (lo + hi)
        k = np.argmax(c - mid * w)
        # a binding point with positive weight means larger e still helps
        if w[k] > 0:
            lo = mid
        else:
            hi = mid
    best = hi
    # the flat part may start earlier; shrink e while the value is unchanged
    val = f(best)
    lo2, hi2 = 0.0, best
    for _ in range(_ITERS):
        mid = 0.5 * (lo2 + hi2)
        if f(mid) <= val + 1e-12:
            hi2 = mid
        else:
            lo2 = mid
    return f(hi2), hi2


def _smallest_eps_within(c, w, target, eps_max):
    """Smallest ``e`` with ``max(c - e w) <= target`` (``c`` already shifted)."""
    if np.max(c) <= target:
        return 0.0
    lo, hi = 0.0, float(eps_max)
    for _ in range(_ITERS):
        mid = 0.5 * (lo + hi)
        if np.max(c - mid * w) <= target:
            hi = mid
        else:
            lo = mid
    return hi


def fit_decay(points: EnvelopePoints, *, alpha_min: float, tau: float,
              eps_ratio: float | None = None, alpha_max: float = 1e3,
              eps_cap: float = EPS_CAP):
    """Dichotomy-type fit ``v + alpha d - eps w <= ln K``.

    ``alpha`` is pushed up while the optimal intercept stays within
    ``tau / 2`` of its value at ``alpha_min``, clipped at zero (a knee rule); ``eps`` is then
    the smallest value keeping the intercept within another ``tau / 2``.
    With ``eps_ratio`` set, ``eps <= eps_ratio * alpha`` is enforced.

    Returns ``(g, alpha, eps)`` with ``g`` the attained intercept (may be
    negative; callers clip ``ln K`` at zero).
    """
    d, w, v = points.d, points.w, points.v

    def emax(alpha):
        return eps_cap if eps_ratio is None else min(eps_cap, eps_ratio * alpha)

    def G(alpha):
        return min_over_eps(v + alpha * d, w, emax(alpha))[0]

    # an intercept below zero buys nothing once ln K is clipped at zero
    g0 = max(G(alpha_min), 0.0)
    target = g0 + 0.5 * tau
    if G(alpha_max) <= target:
        alpha = alpha_max
    else:
        lo, hi = alpha_min, alpha_max
        for _ in range(_ITERS):
            mid = 0.5 * (lo + hi)
            if G(mid) <= target:
                lo = mid
            else:
                hi = mid
        alpha = lo
    c = v + alpha * d
    g_alpha = max(min_over_eps(c, w, emax(alpha))[0], 0.0)
    eps = _smallest_eps_within(c, w, g_alpha + 0.5 * tau, emax(alpha))
    g = float(np.max(c - eps * w))
    return g, float(alpha), float(eps)


def fit_growth_rate(points: EnvelopePoints, *, tau: float, rate_max: float,
                    eps_cap: float = EPS_CAP):
    """Bounded-growth fit ``v - a d - e w <= ln K0``, lexicographic in (a, e).

    ``a`` is the smallest rate whose optimal intercept is within ``tau`` of
    the intercept reachable at ``rate_max``; ``e`` is then the smallest value
    within another ``tau``.  Returns ``(g, a, e)``.
    """
    d, w, v = points.d, points.w, points.v

    def H(a):
        return min_over_eps(v - a * d, w, eps_cap)[0]

    target = H(rate_max) + tau
    if H(0.0) <= target:
        a = 0.0
    else:
        lo, hi = 0.0, rate_max
        for _ in range(_ITERS):
            mid = 0.5 * (lo + hi)
            if H(mid) <= target:
                hi = mid
            else:
                lo = mid
        a = hi
    c = v - a * d
    h_a = min_over_eps(c, w, eps_cap)[0]
    e = _smallest_eps_within(c, w, h_a + tau, eps_cap)
    g = float(np.max(c - e * w))
    return g, float(a), float(e)
