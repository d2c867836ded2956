"""Linear systems ``x' = A(t) x`` on ``[0, horizon]``.

A system is described by an n-by-n grid of scalar expressions in ``t``
together with a growth envelope ``(M, mu)`` such that the spectral norm of
``A(t)`` stays below ``M exp(mu t)``.  Systems are read from a small TOML
schema::

    label = "example 1"
    dim = 1
    horizon = 200.0
    entries = ["-2 - t*sin(t)"]

    [envelope]
    M = 3.0
    mu = 0.5

``entries`` is row-major; a list of rows is accepted as well.  Unknown keys
are rejected.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, DomainError, EnvelopeError
from .expressions import Const, Expr, ExpressionError, parse_expression
from .validation import check_positive, check_real, check_times

try:  # Python >= 3.11
    import tomllib as _toml
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as _toml

__all__ = [
    "MatrixFunction",
    "CallableMatrix",
    "LinearSystem",
    "parse_system",
    "load_system",
    "serialize_system",
    "eval_matrix",
    "builtin_example",
    "check_envelope",
    "BUILTINS",
]

DEFAULT_HORIZON = 200.0
_CONFIG_KEYS = {"dim", "horizon", "entries", "envelope", "label"}
_ENVELOPE_KEYS = {"M", "mu"}


def _spectral_norm(mats: np.ndarray) -> np.ndarray:
    if mats.shape[-1] == 1:
        return np.abs(mats[..., 0, 0])
    return np.linalg.norm(mats, ord=2, axis=(-2, -1))


class _MatrixBase:
    """Shared behaviour of matrix-valued functions of time."""

    dim: int
    envelope: tuple[float, float]

    def __call__(self, t) -> np.ndarray:  # pragma: no cover - abstract
        raise NotImplementedError

    def norm(self, t) -> np.ndarray:
        """Spectral norm of ``A(t)`` (vectorised)."""
        return _spectral_norm(self(t))

    def structural_nonzero(self) -> np.ndarray:
        """Boolean n-by-n mask of entries that are not identically zero."""
        probe = np.linspace(0.0, 1.0, 7) * math.pi + 0.1234
        return np.any(self(probe) != 0.0, axis=0)

    def is_upper_triangular(self) -> bool:
        mask = self.structural_nonzero()
        return not np.any(np.tril(mask, -1))


@dataclass(frozen=True)
class MatrixFunction(_MatrixBase):
    """Expression-defined ``A(t)``.

    Parameters
    ----------
    dim : int
        Matrix size n.
    entries : tuple of Expr
        Row-major n*n expressions.
    envelope : (float, float)
        Growth envelope ``(M, mu)``.
    """

    dim: int
    entries: tuple
    envelope: tuple = (1.0, 0.0)

    def __post_init__(self):
        if len(self.entries) != self.dim * self.dim:
            raise DimensionError(
                f"expected {self.dim * self.dim} entries for dim={self.dim}, got {len(self.entries)}"
            )

    @classmethod
    def from_strings(cls, dim: int, texts: Sequence[str], envelope=(1.0, 0.0)) -> "MatrixFunction":
        return cls(int(dim), tuple(parse_expression(s) for s in texts), tuple(map(float, envelope)))

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        n = self.dim
        out = np.empty(t.shape + (n, n))
        for k, expr in enumerate(self.entries):
            out[..., k // n, k % n] = expr(t)
        return out

    def entry(self, r: int, c: int) -> Expr:
        return self.entries[r * self.dim + c]

    def entry_texts(self) -> list[str]:
        return [e.to_text() for e in self.entries]

    def derivative(self) -> "MatrixFunction":
        """Entry-wise symbolic derivative ``A'(t)``."""
        return MatrixFunction(self.dim, tuple(e.diff() for e in self.entries), self.envelope)

    def structural_nonzero(self) -> np.ndarray:
        mask = np.array([not (isinstance(e, Const) and e.value == 0.0) for e in self.entries])
        return mask.reshape(self.dim, self.dim)

    def block(self, idx: Sequence[int]) -> "MatrixFunction":
        """Principal sub-matrix on the index set ``idx``."""
        idx = list(idx)
        ent = tuple(self.entry(r, c) for r in idx for c in idx)
        return MatrixFunction(len(idx), ent, self.envelope)

    def diagonal_entry(self, r: int) -> "MatrixFunction":
        return MatrixFunction(1, (self.entry(r, r),), self.envelope)


@dataclass(frozen=True, eq=False)
class CallableMatrix(_MatrixBase):
    """``A(t)`` given by a vectorised callable returning ``(..., n, n)`` arrays."""

    dim: int
    func: Callable[[np.ndarray], np.ndarray]
    envelope: tuple = (1.0, 0.0)
    description: str = "callable"

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        out = np.asarray(self.func(t), dtype=float)
        return out.reshape(t.shape + (self.dim, self.dim))


@dataclass(frozen=True, eq=False)
class LinearSystem:
    """``x' = A(t) x`` truncated to ``[0, horizon]``.

    ``reference_spectrum`` holds the closed-form spectrum of a built-in, as a
    tuple of ``(a, b)`` pairs, and is ``None`` otherwise.
    """

    A: _MatrixBase
    horizon: float = DEFAULT_HORIZON
    label: str = ""
    reference_spectrum: tuple | None = None
    parameters: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        check_positive(self.horizon, "horizon")

    @property
    def dim(self) -> int:
        return self.A.dim

    def with_horizon(self, horizon: float) -> "LinearSystem":
        return LinearSystem(self.A, float(horizon), self.label, self.reference_spectrum,
                            dict(self.parameters))


def eval_matrix(system: LinearSystem, t) -> np.ndarray:
    """Evaluate ``A(t)``; scalar ``t`` gives an n-by-n array."""
    arr = check_times(t, system.horizon)
    return system.A(arr)


def _check_finite(A: _MatrixBase, horizon: float, n_points: int) -> None:
    grid = np.linspace(0.0, horizon, n_points)
    vals = A(grid)
    bad = ~np.all(np.isfinite(vals), axis=(-2, -1))
    if np.any(bad):
        where = grid[bad]
        raise DomainError(f"non-finite entry value for t in [{where[0]:.6g}, {where[-1]:.6g}]",
                          t=float(where[0]))


def check_envelope(A: _MatrixBase, horizon: float, envelope=None, n_points: int = 10_000) -> float:
    """Verify ``|A(t)| <= M exp(mu t)`` on a uniform grid.

    Returns the smallest log-slack ``ln(M) + mu t - ln|A(t)|`` seen.
    """
    M, mu = A.envelope if envelope is None else envelope
    grid = np.linspace(0.0, horizon, n_points)
    norms = A.norm(grid)
    bound = M * np.exp(mu * grid)
    # relative slack absorbs rounding in the closed-form bounds
    viol = norms > bound * (1 + 1e-12)
    if np.any(viol):
        k = int(np.argmax(norms - bound))
        raise EnvelopeError(
            f"envelope violated: |A(t)|={norms[k]:.6g} > M exp(mu t)={bound[k]:.6g}",
            t=float(grid[k]), norm=float(norms[k]),
        )
    with np.errstate(divide="ignore"):
        slack = np.log(M) + mu * grid - np.log(norms)
    return float(np.min(slack))


def _infer_envelope(A: _MatrixBase, horizon: float, n_points: int = 10_000) -> tuple[float, float]:
    grid = np.linspace(0.0, horizon, n_points)
    peak = float(np.max(A.norm(grid)))
    return (peak if peak > 0 else 1.0, 0.0)


def _coerce_entries(raw, dim: int) -> list[str]:
    if not isinstance(raw, list):
        raise ConfigError("'entries' must be a list")
    if raw and all(isinstance(r, list) for r in raw):
        if len(raw) != dim or any(len(r) != dim for r in raw):
            raise DimensionError(f"'entries' must be {dim} rows of {dim} expressions")
        raw = [e for row in raw for e in row]
    if len(raw) != dim * dim:
        raise DimensionError(f"dim={dim} needs {dim * dim} entries, got {len(raw)}")
    out = []
    for e in raw:
        if isinstance(e, bool) or not isinstance(e, (str, int, float)):
            raise ConfigError(f"entry {e!r} is not an expression")
        out.append(e if isinstance(e, str) else repr(float(e)))
    return out


def parse_system(config_text: str, *, n_check: int = 10_000) -> LinearSystem:
    """Build a :class:`LinearSystem` from TOML text.

    Raises
    ------
    ExpressionError
        An entry does not parse; carries the column.
    DimensionError
        ``entries`` does not match ``dim``.
    DomainError
        An entry is not finite somewhere on ``[0, horizon]``.
    EnvelopeError
        An explicit envelope fails at a sampled time.
    """
    try:
        data = _toml.loads(config_text)
    except _toml.TOMLDecodeError as exc:
        raise ConfigError(f"invalid config syntax: {exc}") from None
    unknown = set(data) - _CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for key in ("dim", "entries"):
        if key not in data:
            raise ConfigError(f"missing required key {key!r}")
    dim = data["dim"]
    if isinstance(dim, bool) or not isinstance(dim, int) or dim < 1:
        raise DimensionError(f"'dim' must be a positive integer, got {dim!r}")
    horizon = check_positive(data.get("horizon", DEFAULT_HORIZON), "horizon")
    label = data.get("label", "")
    if not isinstance(label, str):
        raise ConfigError("'label' must be a string")
    texts = _coerce_entries(data["entries"], dim)
    exprs = []
    for k, s in enumerate(texts):
        try:
            exprs.append(parse_expression(s))
        except ExpressionError as exc:
            raise ExpressionError(f"entry {k} ({k // dim},{k % dim}): {exc.args[0]}",
                                  position=exc.position) from None
    A = MatrixFunction(dim, tuple(exprs))
    _check_finite(A, horizon, n_check)
    env = data.get("envelope")
    if env is None:
        envelope = _infer_envelope(A, horizon, n_check)
    else:
        if not isinstance(env, dict):
            raise ConfigError("'envelope' must be a table with keys M and mu")
        unknown = set(env) - _ENVELOPE_KEYS
        missing = _ENVELOPE_KEYS - set(env)
        if unknown or missing:
            raise ConfigError(f"'envelope' needs exactly M and mu (unknown={sorted(unknown)}, "
                              f"missing={sorted(missing)})")
        envelope = (check_positive(env["M"], "envelope.M"), check_real(env["mu"], "envelope.mu"))
        if envelope[1] < 0:
            raise ConfigError("envelope.mu must be nonnegative")
    A = MatrixFunction(dim, A.entries, envelope)
    check_envelope(A, horizon, n_points=n_check)
    return LinearSystem(A, horizon, label)


def load_system(path) -> LinearSystem:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_system(fh.read())


def _toml_string(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"') + '"'


def serialize_system(system: LinearSystem) -> str:
    """Inverse of :func:`parse_system` for expression-defined systems."""
    A = system.A
    if not isinstance(A, MatrixFunction):
        raise TypeError("only expression-defined systems can be serialized")
    rows = []
    n = A.dim
    texts = A.entry_texts()
    for r in range(n):
        rows.append("  [" + ", ".join(_toml_string(s) for s in texts[r * n:(r + 1) * n]) + "],")
    M, mu = A.envelope
    lines = [
        f"label = {_toml_string(system.label)}",
        f"dim = {n}",
        f"horizon = {float(system.horizon)!r}",
        "entries = [",
        *rows,
        "]",
        "",
        "[envelope]",
        f"M = {float(M)!r}",
        f"mu = {float(mu)!r}",
        "",
    ]
    return "\n".join(lines)


# ---------------------------------------------------------------- built-ins

def _example1(lambda0: float = -2.0, a: float = -1.0):
    if not (lambda0 < a < 0):
        raise ConfigError(f"example1 needs lambda0 < a < 0, got lambda0={lambda0}, a={a}")
    texts = [f"{lambda0!r} + ({a!r})*t*sin(t)"]
    # |l0 + a t sin t| <= |l0| + |a| t <= (|l0| + |a|) exp(|a| t / |l0|)
    env = (abs(lambda0) + abs(a), abs(a) / abs(lambda0))
    return 1, texts, env, ((lambda0 + a, lambda0 - a),)


def _example2(lambda1: float = 1.0):
    texts = [f"({lambda1!r})*(sin(ln(t + 1)) + cos(ln(t + 1)))"]
    env = (math.sqrt(2) * abs(lambda1) if lambda1 != 0 else 1.0, 0.0)
    r = abs(lambda1)
    return 1, texts, env, ((-r, r),)


def _planar(lambda0: float = -4.0, a: float = -1.0, lambda1: float = 1.0):
    if not (lambda0 < a < 0):
        raise ConfigError(f"planar needs lambda0 < a < 0, got lambda0={lambda0}, a={a}")
    if not (lambda0 - a < -abs(lambda1)):
        raise ConfigError(f"planar needs lambda0 - a < -|lambda1|, got {lambda0 - a} >= {-abs(lambda1)}")
    _, t1, e1, s1 = _example1(lambda0, a)
    _, t2, e2, s2 = _example2(lambda1)
    texts = [t1[0], "0", "0", t2[0]]
    env = (max(e1[0], e2[0]), max(e1[1], e2[1]))
    return 2, texts, env, s1 + s2


BUILTINS = {
    "example1": (_example1, {"lambda0": -2.0, "a": -1.0}),
    "example2": (_example2, {"lambda1": 1.0}),
    "planar": (_planar, {"lambda0": -4.0, "a": -1.0, "lambda1": 1.0}),
}


def builtin_example(name: str, parameters: Mapping[str, float] | None = None, *,
                    horizon: float = DEFAULT_HORIZON, **kwargs) -> LinearSystem:
    """Return a catalogue system with its closed-form reference spectrum.

    Parameters may be passed as a mapping or as keyword arguments
    (``lambda0``, ``a``, ``lambda1``); omitted ones take the defaults.
    """
    if name not in BUILTINS:
        raise ConfigError(f"unknown example {name!r}; choose from {sorted(BUILTINS)}")
    builder, defaults = BUILTINS[name]
    params = dict(defaults)
    given = dict(parameters or {})
    given.update(kwargs)
    unknown = set(given) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown parameters for {name}: {sorted(unknown)}")
    params.update({k: check_real(v, k) for k, v in given.items()})
    dim, texts, env, ref = builder(**params)
    A = MatrixFunction.from_strings(dim, texts, env)
    sorted_ref = tuple(sorted((float(lo), float(hi)) for lo, hi in ref))
    return LinearSystem(A, float(horizon), name, sorted_ref, params)
