"""scikit-learn style front ends.

``X`` is a system: a :class:`LinearSystem`, a built-in name or config text.
Shifts and times are passed as 1-d arrays to ``predict``/``transform``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .contraction import certify, contract_system
from .dichotomy import DichotomyPlan
from .spectrum import SweepPlan, compute_spectrum
from .sysmodel import LinearSystem, builtin_example, parse_system, BUILTINS
from .validation import check_positive

__all__ = ["DichotomySpectrum", "NonuniformContractor", "as_system"]


def as_system(X, horizon: float | None = None) -> LinearSystem:
    """Coerce ``X`` to a :class:`LinearSystem`."""
    if isinstance(X, LinearSystem):
        system = X
    elif isinstance(X, str) and X in BUILTINS:
        system = builtin_example(X)
    elif isinstance(X, str):
        system = parse_system(X)
    else:
        raise TypeError(f"expected a LinearSystem, builtin name or config text, got {type(X)!r}")
    if horizon is not None:
        system = system.with_horizon(check_positive(horizon, "horizon"))
    return system


def _column(values, name: str) -> np.ndarray:
    return check_array(np.asarray(values, float).reshape(-1, 1), input_name=name).ravel()


class DichotomySpectrum(BaseEstimator):
    """Sweep shifts and locate the dichotomy spectrum.

    ``predict`` marks shifts inside the fitted spectrum (1) or the
    resolvent (0); ``decision_function`` is the distance to the spectrum.
    """

    def __init__(self, tol=0.05, n_coarse=32, n_pairs=400, log_k_max=1.5, horizon=None,
                 n_jobs=1, seed=0):
        self.tol = tol
        self.n_coarse = n_coarse
        self.n_pairs = n_pairs
        self.log_k_max = log_k_max
        self.horizon = horizon
        self.n_jobs = n_jobs
        self.seed = seed

    def _plan(self) -> SweepPlan:
        check_positive(self.tol, "tol")
        dich = DichotomyPlan(n_pairs=int(self.n_pairs), log_k_max=float(self.log_k_max),
                             seed=int(self.seed))
        return SweepPlan(n_coarse=int(self.n_coarse), tol=float(self.tol), dichotomy=dich,
                         n_jobs=int(self.n_jobs))

    def fit(self, X, y=None):
        self.system_ = as_system(X, self.horizon)
        self.spectrum_ = compute_spectrum(self.system_, self._plan())
        self.intervals_ = np.asarray(self.spectrum_.intervals, float).reshape(-1, 2)
        self.n_intervals_ = self.spectrum_.m
        return self

    def decision_function(self, lam) -> np.ndarray:
        check_is_fitted(self, "spectrum_")
        return self.spectrum_.distance(_column(lam, "lam"))

    def predict(self, lam) -> np.ndarray:
        return (self.decision_function(lam) == 0).astype(int)


class NonuniformContractor(TransformerMixin, BaseEstimator):
    """Contract a system to diagonal-plus-small form.

    ``transform(t)`` returns the diagonal of ``C(t)`` (one row per time);
    ``certificate_`` holds the fresh-grid re-check.
    """

    def __init__(self, delta=0.5, tol=0.05, horizon=None, certify=True, seed=0):
        self.delta = delta
        self.tol = tol
        self.horizon = horizon
        self.certify = certify
        self.seed = seed

    def fit(self, X, y=None):
        check_positive(self.delta, "delta")
        self.system_ = as_system(X, self.horizon)
        sweep = SweepPlan(tol=float(self.tol), dichotomy=DichotomyPlan(seed=int(self.seed)))
        self.contraction_ = contract_system(self.system_, float(self.delta), sweep=sweep)
        self.certificate_ = certify(self.contraction_) if self.certify else None
        self.K_delta_eps_ = self.contraction_.K_delta_eps
        return self

    def _times(self, t) -> np.ndarray:
        check_is_fitted(self, "contraction_")
        t = _column(t, "t")
        if np.any((t < 0) | (t > self.system_.horizon)):
            raise ValueError(f"times must lie in [0, {self.system_.horizon}]")
        return t

    def transform(self, t) -> np.ndarray:
        t = self._times(t)
        C = self.contraction_.C(t)
        return np.diagonal(C, axis1=-2, axis2=-1).copy()

    def perturbation(self, t) -> np.ndarray:
        """``B(t)`` stacked along the first axis."""
        t = self._times(t)
        return self.contraction_.B(t)
