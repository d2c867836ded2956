"""Scalar expressions in the single variable ``t``.

The grammar is deliberately small: numeric constants, ``t``, ``pi``, ``e``,
the binary operators ``+ - * /``, powers (``^`` or ``**``) and the functions
``sin, cos, exp, ln, abs``.  Expressions are parsed once into an immutable
tree which evaluates vectorised over numpy arrays and can be differentiated
symbolically.
"""

from __future__ import annotations

import ast
import math
from dataclasses import dataclass
from typing import Union

import numpy as np

__all__ = [
    "Expr",
    "ExpressionError",
    "parse_expression",
    "const",
    "var",
]


class ExpressionError(ValueError):
    """Raised for malformed expressions; carries the 1-based column."""

    def __init__(self, message: str, text: str = "", position: int | None = None):
        self.text = text
        self.position = position
        where = f" at column {position}" if position is not None else ""
        super().__init__(f"{message}{where}: {text!r}" if text else message)


FUNCTIONS = {
    "sin": np.sin,
    "cos": np.cos,
    "exp": np.exp,
    "ln": np.log,
    "abs": np.abs,
}

CONSTANTS = {"pi": math.pi, "e": math.e}

ArrayLike = Union[float, np.ndarray]


class Expr:
    """Base node.  Subclasses are frozen dataclasses."""

    def __call__(self, t: ArrayLike) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        with np.errstate(all="ignore"):
            out = self._eval(t)
        return np.broadcast_to(out, t.shape).astype(float, copy=True)

    def _eval(self, t):  # pragma: no cover - abstract
        raise NotImplementedError

    def diff(self) -> "Expr":
        raise NotImplementedError

    def is_zero(self) -> bool:
        return isinstance(self, Const) and self.value == 0.0

    # operator sugar with light constant folding
    def __add__(self, other):
        other = _wrap(other)
        if self.is_zero():
            return other
        if other.is_zero():
            return self
        if isinstance(self, Const) and isinstance(other, Const):
            return Const(self.value + other.value)
        return BinOp("+", self, other)

    def __radd__(self, other):
        return _wrap(other) + self

    def __sub__(self, other):
        other = _wrap(other)
        if other.is_zero():
            return self
        if isinstance(self, Const) and isinstance(other, Const):
            return Const(self.value - other.value)
        if self.is_zero():
            return -other
        return BinOp("-", self, other)

    def __rsub__(self, other):
        return _wrap(other) - self

    def __mul__(self, other):
        other = _wrap(other)
        if self.is_zero() or other.is_zero():
            return Const(0.0)
        if isinstance(self, Const) and self.value == 1.0:
            return other
        if isinstance(other, Const) and other.value == 1.0:
            return self
        if isinstance(self, Const) and isinstance(other, Const):
            return Const(self.value * other.value)
        return BinOp("*", self, other)

    def __rmul__(self, other):
        return _wrap(other) * self

    def __truediv__(self, other):
        other = _wrap(other)
        if self.is_zero():
            return Const(0.0)
        if isinstance(other, Const) and other.value == 1.0:
            return self
        return BinOp("/", self, other)

    def __rtruediv__(self, other):
        return _wrap(other) / self

    def __neg__(self):
        if isinstance(self, Const):
            return Const(-self.value)
        if isinstance(self, Neg):
            return self.arg
        return Neg(self)

    def __pow__(self, other):
        other = _wrap(other)
        if isinstance(other, Const) and other.value == 1.0:
            return self
        if isinstance(other, Const) and other.value == 0.0:
            return Const(1.0)
        return Pow(self, other)

    def to_text(self) -> str:
        return self._text(0)

    def __str__(self) -> str:
        return self.to_text()


def _wrap(x) -> Expr:
    if isinstance(x, Expr):
        return x
    return Const(float(x))


def const(value: float) -> Expr:
    return Const(float(value))


def var() -> Expr:
    return Var()


# precedence levels used when printing
_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "neg": 3, "^": 4, "atom": 5}


@dataclass(frozen=True, eq=True)
class Const(Expr):
    value: float

    def _eval(self, t):
        return np.full(t.shape, self.value)

    def diff(self):
        return Const(0.0)

    def _text(self, prec):
        s = repr(float(self.value))
        if self.value < 0 and prec > 0:
            return f"({s})"
        return s


@dataclass(frozen=True, eq=True)
class Var(Expr):
    def _eval(self, t):
        return t

    def diff(self):
        return Const(1.0)

    def _text(self, prec):
        return "t"


@dataclass(frozen=True, eq=True)
class Neg(Expr):
    arg: Expr

    def _eval(self, t):
        return -self.arg._eval(t)

    def diff(self):
        return -self.arg.diff()

    def _text(self, prec):
        s = "-" + self.arg._text(_PREC["neg"])
        return f"({s})" if prec > _PREC["neg"] - 2 else s


@dataclass(frozen=True, eq=True)
class BinOp(Expr):
    op: str
    left: Expr
    right: Expr

    def _eval(self, t):
        a = self.left._eval(t)
        b = self.right._eval(t)
        if self.op == "+":
            return a + b
        if self.op == "-":
            return a - b
        if self.op == "*":
            return a * b
        return a / b

    def diff(self):
        a, b = self.left, self.right
        da, db = a.diff(), b.diff()
        if self.op == "+":
            return da + db
        if self.op == "-":
            return da - db
        if self.op == "*":
            return da * b + a * db
        return (da * b - a * db) / (b * b)

    def _text(self, prec):
        p = _PREC[self.op]
        # right operand of - and / binds tighter to keep associativity
        rp = p + 1 if self.op in "-/" else p
        s = f"{self.left._text(p)} {self.op} {self.right._text(rp)}"
        return f"({s})" if prec > p else s


@dataclass(frozen=True, eq=True)
class Pow(Expr):
    base: Expr
    exponent: Expr

    def _eval(self, t):
        return np.power(self.base._eval(t), self.exponent._eval(t))

    def diff(self):
        b, e = self.base, self.exponent
        if isinstance(e, Const):
            return e * Pow(b, Const(e.value - 1.0)) * b.diff()
        # d(b^e) = b^e (e' ln b + e b'/b)
        return self * (e.diff() * Func("ln", b) + e * b.diff() / b)

    def _text(self, prec):
        p = _PREC["^"]
        s = f"{self.base._text(p + 1)}^{self.exponent._text(p + 1)}"
        return f"({s})" if prec > p else s


@dataclass(frozen=True, eq=True)
class Func(Expr):
    name: str
    arg: Expr

    def _eval(self, t):
        return FUNCTIONS[self.name](self.arg._eval(t))

    def diff(self):
        u = self.arg
        du = u.diff()
        if du.is_zero():
            return Const(0.0)
        if self.name == "sin":
            return Func("cos", u) * du
        if self.name == "cos":
            return -(Func("sin", u) * du)
        if self.name == "exp":
            return self * du
        if self.name == "ln":
            return du / u
        # abs: derivative u'·sign(u), written as u'·u/|u| to stay in the grammar
        return du * u / self

    def _text(self, prec):
        return f"{self.name}({self.arg._text(0)})"


_BINOPS = {ast.Add: "+", ast.Sub: "-", ast.Mult: "*", ast.Div: "/"}


def _convert(node: ast.AST, text: str) -> Expr:
    col = getattr(node, "col_offset", None)
    pos = None if col is None else col + 1
    if isinstance(node, ast.Expression):
        return _convert(node.body, text)
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) \
            and not isinstance(node.value, bool):
        return Const(float(node.value))
    if isinstance(node, ast.Name):
        if node.id == "t":
            return Var()
        if node.id in CONSTANTS:
            return Const(CONSTANTS[node.id])
        raise ExpressionError(f"unknown name {node.id!r}", text, pos)
    if isinstance(node, ast.UnaryOp):
        arg = _convert(node.operand, text)
        if isinstance(node.op, ast.USub):
            return -arg
        if isinstance(node.op, ast.UAdd):
            return arg
        raise ExpressionError("unsupported unary operator", text, pos)
    if isinstance(node, ast.BinOp):
        left = _convert(node.left, text)
        right = _convert(node.right, text)
        if isinstance(node.op, ast.Pow):
            return Pow(left, right)
        op = _BINOPS.get(type(node.op))
        if op is None:
            raise ExpressionError("unsupported operator", text, pos)
        return BinOp(op, left, right)
    if isinstance(node, ast.Call):
        if not isinstance(node.func, ast.Name) or node.func.id not in FUNCTIONS:
            name = getattr(node.func, "id", "?")
            raise ExpressionError(f"unknown function {name!r}", text, pos)
        if len(node.args) != 1 or node.keywords:
            raise ExpressionError(f"{node.func.id} takes one argument", text, pos)
        return Func(node.func.id, _convert(node.args[0], text))
    raise ExpressionError("unsupported syntax", text, pos)


def parse_expression(text: str) -> Expr:
    """Parse ``text`` into an expression tree.

    >>> parse_expression("-2 - t*sin(t)")(0.0)
    array(-2.)
    """
    if not isinstance(text, str):
        return _wrap(text)
    src = text.replace("−", "-").replace("×", "*").replace("^", "**")
    if not src.strip():
        raise ExpressionError("empty expression", text, 1)
    try:
        tree = ast.parse(src.strip(), mode="eval")
    except SyntaxError as exc:
        raise ExpressionError(f"syntax error ({exc.msg})", text, exc.offset) from None
    return _convert(tree, text)
