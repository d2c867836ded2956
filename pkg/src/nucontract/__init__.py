"""Nonuniform exponential-dichotomy spectra and nonuniform contraction."""

from .expressions import parse_expression
from .sysmodel import (
    CallableMatrix,
    LinearSystem,
    MatrixFunction,
    builtin_example,
    eval_matrix,
    parse_system,
    serialize_system,
)

__version__ = "0.1.0"

from .contraction import certify, contract_system  # noqa: E402
from .dichotomy import test_dichotomy  # noqa: E402
from .estimators import DichotomySpectrum, NonuniformContractor  # noqa: E402
from .spectrum import compute_spectrum  # noqa: E402
from .triangular import triangularize  # noqa: E402

__all__ = [
    "CallableMatrix",
    "DichotomySpectrum",
    "NonuniformContractor",
    "certify",
    "compute_spectrum",
    "contract_system",
    "test_dichotomy",
    "triangularize",
    "LinearSystem",
    "MatrixFunction",
    "builtin_example",
    "eval_matrix",
    "parse_expression",
    "parse_system",
    "serialize_system",
]
