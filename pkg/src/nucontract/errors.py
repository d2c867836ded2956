"""Exception hierarchy shared by all stages."""

from __future__ import annotations


class NucontractError(Exception):
    """Base class.  ``stage`` names the pipeline stage that failed."""

    stage = "general"

    def __init__(self, message: str, *, t: float | None = None, stage: str | None = None):
        self.t = t
        if stage is not None:
            self.stage = stage
        where = f" (t={t:.6g})" if t is not None else ""
        super().__init__(f"{message}{where}")


class ConfigError(NucontractError, ValueError):
    stage = "config"


class DimensionError(ConfigError):
    pass


class DomainError(ConfigError):
    """An entry is not finite somewhere on the horizon."""


class EnvelopeError(ConfigError):
    """The growth envelope ``|A(t)| <= M exp(mu t)`` fails at a sample."""

    def __init__(self, message: str, *, t: float, norm: float):
        self.norm = norm
        super().__init__(message, t=t)


class HorizonError(NucontractError, ValueError):
    stage = "evaluation"


class IntegrationError(NucontractError, RuntimeError):
    stage = "flow"


class ConditioningError(IntegrationError):
    pass


class NoGapError(NucontractError, RuntimeError):
    """The shifted growth exponents do not separate at the split time."""

    stage = "dichotomy"


class FitError(NucontractError, ValueError):
    stage = "fit"


class SpectrumError(NucontractError, RuntimeError):
    stage = "spectrum"


class TriangularError(NucontractError, RuntimeError):
    stage = "triangular"


class ContractionError(NucontractError, RuntimeError):
    stage = "contraction"
