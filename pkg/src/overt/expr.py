"""Symbolic expressions: trees, parsing, evaluation, differentiation and interval ranges.

Grammar (whitespace is ignored)::

    expr    = term , { ("+" | "-") , term } ;
    term    = unary , { ("*" | "/") , unary } ;
    unary   = "-" , unary | power ;
    power   = primary , [ "^" , unary ] ;
    primary = number | ident | ident , "(" , expr , { "," , expr } , ")" | "(" , expr , ")" ;
    number  = digit , { digit } , [ "." , { digit } ] , [ ("e" | "E") , [ "+" | "-" ] , digit , { digit } ] ;
    ident   = letter , { letter | digit | "_" } ;

Supported calls: sin, cos, exp, log, tanh, relu, abs, sqrt (sugar for ``^0.5``),
min and max (two or more arguments).  ``pi`` is the constant pi.

The nonlinear univariate operations understood by the bounding code are
exposed through :func:`unary_view`: sin, cos, exp, log, tanh, ``x^c`` (constant
exponent), ``c^x`` (constant base) and ``c/x`` (constant numerator).
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Callable, Iterator, Mapping

import numpy as np


class ExprError(ValueError):
    """Base error for malformed or unsupported expressions."""


class ParseError(ExprError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} at position {position}")
        self.position = position


class EvaluationError(ExprError):
    pass


class DomainError(EvaluationError):
    pass


class NonDifferentiableError(ExprError):
    pass


# ---------------------------------------------------------------------------
# Intervals
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Interval:
    lo: float
    hi: float

    def __post_init__(self):
        lo, hi = float(self.lo), float(self.hi)
        if math.isnan(lo) or math.isnan(hi):
            raise ValueError("interval endpoints must not be NaN")
        if lo > hi:
            raise ValueError(f"empty interval [{lo}, {hi}]")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def width(self) -> float:
        return self.hi - self.lo

    @property
    def mid(self) -> float:
        return 0.5 * (self.lo + self.hi)

    def is_finite(self) -> bool:
        return math.isfinite(self.lo) and math.isfinite(self.hi)

    def contains(self, x: float, tol: float = 0.0) -> bool:
        return self.lo - tol <= x <= self.hi + tol

    def hull(self, other: Interval) -> Interval:
        return Interval(min(self.lo, other.lo), max(self.hi, other.hi))

    def intersect(self, other: Interval) -> Interval:
        return Interval(max(self.lo, other.lo), min(self.hi, other.hi))

    def widen(self, rel: float = 1e-12, abs_: float = 1e-15) -> Interval:
        pad_lo = rel * abs(self.lo) + abs_
        pad_hi = rel * abs(self.hi) + abs_
        return Interval(self.lo - pad_lo, self.hi + pad_hi)

    def __iter__(self) -> Iterator[float]:
        yield self.lo
        yield self.hi

    def __repr__(self) -> str:
        return f"Interval({self.lo!r}, {self.hi!r})"


def as_interval(value) -> Interval:
    if isinstance(value, Interval):
        return value
    lo, hi = value
    return Interval(lo, hi)


# ---------------------------------------------------------------------------
# Expression nodes
# ---------------------------------------------------------------------------

UNARY_OPS = ("neg", "sin", "cos", "exp", "log", "tanh", "relu", "abs")
BINARY_OPS = ("+", "-", "*", "/", "^")
NARY_OPS = ("min", "max")
SMOOTH_UNARY = ("sin", "cos", "exp", "log", "tanh")
#: tags accepted by :func:`find_inflections` and the bounding code
SUPPORTED_NONLINEAR = ("sin", "cos", "exp", "log", "tanh", "pow", "cpow", "recip")


class Expr:
    """Base class of the immutable expression tree."""

    __slots__ = ()

    def __str__(self) -> str:
        return to_string(self)

    # convenience constructors for building trees in code
    def __add__(self, other):
        return Binary("+", self, _lift(other))

    def __radd__(self, other):
        return Binary("+", _lift(other), self)

    def __sub__(self, other):
        return Binary("-", self, _lift(other))

    def __rsub__(self, other):
        return Binary("-", _lift(other), self)

    def __mul__(self, other):
        return Binary("*", self, _lift(other))

    def __rmul__(self, other):
        return Binary("*", _lift(other), self)

    def __truediv__(self, other):
        return Binary("/", self, _lift(other))

    def __rtruediv__(self, other):
        return Binary("/", _lift(other), self)

    def __pow__(self, other):
        return Binary("^", self, _lift(other))

    def __neg__(self):
        return Unary("neg", self)


def _lift(value) -> Expr:
    if isinstance(value, Expr):
        return value
    return Const(float(value))


@dataclass(frozen=True, eq=True, repr=True)
class Const(Expr):
    value: float

    def __post_init__(self):
        v = float(self.value)
        if not math.isfinite(v):
            raise ExprError(f"non-finite constant {v}")
        object.__setattr__(self, "value", v)


@dataclass(frozen=True, eq=True, repr=True)
class Var(Expr):
    name: str


@dataclass(frozen=True, eq=True, repr=True)
class Unary(Expr):
    op: str
    arg: Expr

    def __post_init__(self):
        if self.op not in UNARY_OPS:
            raise ExprError(f"unknown unary operator {self.op!r}")


@dataclass(frozen=True, eq=True, repr=True)
class Binary(Expr):
    op: str
    left: Expr
    right: Expr

    def __post_init__(self):
        if self.op not in BINARY_OPS:
            raise ExprError(f"unknown binary operator {self.op!r}")


@dataclass(frozen=True, eq=True, repr=True)
class Nary(Expr):
    op: str
    args: tuple

    def __post_init__(self):
        if self.op not in NARY_OPS:
            raise ExprError(f"unknown n-ary operator {self.op!r}")
        object.__setattr__(self, "args", tuple(self.args))
        if len(self.args) < 2:
            raise ExprError(f"{self.op} needs at least two arguments")


def children(e: Expr) -> tuple:
    if isinstance(e, Unary):
        return (e.arg,)
    if isinstance(e, Binary):
        return (e.left, e.right)
    if isinstance(e, Nary):
        return e.args
    return ()


def free_vars(e: Expr) -> set[str]:
    out: set[str] = set()
    stack = [e]
    while stack:
        node = stack.pop()
        if isinstance(node, Var):
            out.add(node.name)
        else:
            stack.extend(children(node))
    return out


def is_constant(e: Expr) -> bool:
    return not free_vars(e)


def const_value(e: Expr) -> float:
    return float(evaluate(e, {}))


def substitute(e: Expr, mapping: Mapping[str, Expr | float]) -> Expr:
    """Replace variables by expressions (or numbers)."""
    if isinstance(e, Var):
        if e.name in mapping:
            return _lift(mapping[e.name])
        return e
    if isinstance(e, Const):
        return e
    if isinstance(e, Unary):
        return Unary(e.op, substitute(e.arg, mapping))
    if isinstance(e, Binary):
        return Binary(e.op, substitute(e.left, mapping), substitute(e.right, mapping))
    return Nary(e.op, tuple(substitute(a, mapping) for a in e.args))


def fold_constants(e: Expr) -> Expr:
    """Collapse every variable-free subtree into a single constant."""
    if isinstance(e, (Const, Var)):
        return e
    if is_constant(e):
        return Const(const_value(e))
    if isinstance(e, Unary):
        return Unary(e.op, fold_constants(e.arg))
    if isinstance(e, Binary):
        return Binary(e.op, fold_constants(e.left), fold_constants(e.right))
    return Nary(e.op, tuple(fold_constants(a) for a in e.args))


def unary_view(e: Expr):
    """Return ``(tag, param, arg)`` when ``e`` is a supported univariate nonlinearity.

    ``x^c`` maps to ``("pow", c, x)``, ``c^x`` to ``("cpow", c, x)`` and ``c/x`` to
    ``("recip", c, x)``.  Anything else returns ``None``.
    """
    if isinstance(e, Unary) and e.op in SMOOTH_UNARY:
        return e.op, None, e.arg
    if isinstance(e, Binary):
        lc, rc = is_constant(e.left), is_constant(e.right)
        if e.op == "^" and rc and not lc:
            return "pow", const_value(e.right), e.left
        if e.op == "^" and lc and not rc:
            return "cpow", const_value(e.left), e.right
        if e.op == "/" and lc and not rc:
            return "recip", const_value(e.left), e.right
    return None


def linear_form(e: Expr):
    """Return ``(coeffs, const)`` if ``e`` is affine in its variables, else None."""
    if isinstance(e, Const):
        return {}, e.value
    if isinstance(e, Var):
        return {e.name: 1.0}, 0.0
    if isinstance(e, Unary):
        if e.op != "neg":
            return None
        inner = linear_form(e.arg)
        if inner is None:
            return None
        return {k: -v for k, v in inner[0].items()}, -inner[1]
    if isinstance(e, Binary):
        if e.op in "+-":
            a, b = linear_form(e.left), linear_form(e.right)
            if a is None or b is None:
                return None
            sign = 1.0 if e.op == "+" else -1.0
            coeffs = dict(a[0])
            for k, v in b[0].items():
                coeffs[k] = coeffs.get(k, 0.0) + sign * v
            return coeffs, a[1] + sign * b[1]
        if e.op == "*":
            if is_constant(e.left):
                c, inner = const_value(e.left), linear_form(e.right)
            elif is_constant(e.right):
                c, inner = const_value(e.right), linear_form(e.left)
            else:
                return None
            if inner is None:
                return None
            return {k: c * v for k, v in inner[0].items()}, c * inner[1]
        if e.op == "/" and is_constant(e.right):
            d = const_value(e.right)
            inner = linear_form(e.left)
            if inner is None or d == 0.0:
                return None
            return {k: v / d for k, v in inner[0].items()}, inner[1] / d
        if e.op == "^" and is_constant(e):
            return {}, const_value(e)
        return None
    return None


def is_affine(e: Expr) -> bool:
    return linear_form(e) is not None


def affine_expr(coeffs: Mapping[str, float], const: float = 0.0) -> Expr:
    """Build a readable affine expression from a linear form."""
    out: Expr | None = None
    for name in sorted(coeffs):
        c = coeffs[name]
        if c == 0.0:
            continue
        term: Expr = Var(name) if c == 1.0 else Binary("*", Const(c), Var(name))
        out = term if out is None else Binary("+", out, term)
    if out is None:
        return Const(const)
    if const != 0.0:
        out = Binary("+", out, Const(const))
    return out


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<id>[A-Za-z_][A-Za-z0-9_]*)|(?P<op>[-+*/^(),]))"
)

_FUNCS = {"sin": 1, "cos": 1, "exp": 1, "log": 1, "tanh": 1, "relu": 1, "abs": 1, "sqrt": 1}


def _tokenize(text: str):
    pos = 0
    tokens = []
    while True:
        while pos < len(text) and text[pos].isspace():
            pos += 1
        if pos >= len(text):
            break
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            raise ParseError(f"unexpected character {text[pos]!r}", pos)
        start = m.start(m.lastgroup)
        tokens.append((m.lastgroup, m.group(m.lastgroup), start))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value: str):
        kind, val, pos = self.take()
        if val != value:
            raise ParseError(f"expected {value!r}, found {val or 'end of input'!r}", pos)

    def parse(self) -> Expr:
        e = self.expr()
        kind, val, pos = self.peek()
        if kind != "end":
            raise ParseError(f"unexpected token {val!r}", pos)
        return e

    def expr(self) -> Expr:
        e = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            e = Binary(op, e, self.term())
        return e

    def term(self) -> Expr:
        e = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            e = Binary(op, e, self.unary())
        return e

    def unary(self) -> Expr:
        kind, val, pos = self.peek()
        if kind == "op" and val == "-":
            self.take()
            nxt = self.peek()
            if nxt[0] == "num":
                # literal negative number, unless it is a power base
                self.take()
                if self.peek()[1] == "^":
                    self.i -= 1
                    return Unary("neg", self.power())
                return Const(-float(nxt[1]))
            return Unary("neg", self.unary())
        return self.power()

    def power(self) -> Expr:
        base = self.primary()
        if self.peek()[1] == "^":
            _, _, pos = self.take()
            exponent = self.unary()
            bc, ec = is_constant(base), is_constant(exponent)
            if not bc and not ec:
                raise ParseError("variable exponent with variable base is unsupported", pos)
            if ec:
                exponent = Const(const_value(exponent))
            return Binary("^", base, exponent)
        return base

    def primary(self) -> Expr:
        kind, val, pos = self.take()
        if kind == "num":
            return Const(float(val))
        if kind == "id":
            if self.peek()[1] == "(":
                return self.call(val, pos)
            if val == "pi":
                return Const(math.pi)
            return Var(val)
        if val == "(":
            e = self.expr()
            self.expect(")")
            return e
        raise ParseError(f"unexpected token {val or 'end of input'!r}", pos)

    def call(self, name: str, pos: int) -> Expr:
        self.expect("(")
        args = [self.expr()]
        while self.peek()[1] == ",":
            self.take()
            args.append(self.expr())
        self.expect(")")
        if name in ("min", "max"):
            if len(args) < 2:
                raise ParseError(f"{name} expects at least 2 arguments, got {len(args)}", pos)
            return Nary(name, tuple(args))
        if name not in _FUNCS:
            raise ParseError(f"unknown function {name!r}", pos)
        if len(args) != _FUNCS[name]:
            raise ParseError(f"{name} expects 1 argument, got {len(args)}", pos)
        if name == "sqrt":
            return Binary("^", args[0], Const(0.5))
        return Unary(name, args[0])


def parse(text: str) -> Expr:
    """Parse infix text into an :class:`Expr`."""
    return _Parser(text).parse()


# ---------------------------------------------------------------------------
# Printing
# ---------------------------------------------------------------------------

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "neg": 3, "^": 4}


def _prec(e: Expr) -> int:
    if isinstance(e, Binary):
        return _PREC[e.op]
    if isinstance(e, Unary) and e.op == "neg":
        return 3
    return 5


def _fmt_num(v: float) -> str:
    s = repr(float(v))
    return f"({s})" if v < 0 or s.startswith("-") else s


def to_string(e: Expr) -> str:
    if isinstance(e, Const):
        return _fmt_num(e.value)
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Unary):
        if e.op == "neg":
            inner = to_string(e.arg)
            if isinstance(e.arg, Const) or _prec(e.arg) < 3:
                inner = f"({inner})"
            return f"-{inner}"
        return f"{e.op}({to_string(e.arg)})"
    if isinstance(e, Nary):
        return f"{e.op}({', '.join(to_string(a) for a in e.args)})"
    p = _PREC[e.op]
    left, right = to_string(e.left), to_string(e.right)
    if e.op == "^":
        if _prec(e.left) < 5:
            left = f"({left})"
        if _prec(e.right) < 5:
            right = f"({right})"
        return f"{left}^{right}"
    if _prec(e.left) < p:
        left = f"({left})"
    if _prec(e.right) <= p:
        right = f"({right})"
    return f"{left} {e.op} {right}"


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def _check_domain(mask, message: str):
    if np.any(mask):
        raise DomainError(message)


def evaluate(e: Expr, binding: Mapping[str, float]):
    """Evaluate ``e``; bindings may be floats or equally-shaped numpy arrays."""
    result = _eval(e, binding)
    if np.ndim(result) == 0:
        return float(result)
    return result


def _eval(e: Expr, b):
    if isinstance(e, Const):
        return e.value
    if isinstance(e, Var):
        try:
            return b[e.name]
        except KeyError:
            raise EvaluationError(f"unbound variable {e.name!r}") from None
    if isinstance(e, Unary):
        x = np.asarray(_eval(e.arg, b), dtype=float)
        op = e.op
        if op == "neg":
            return -x
        if op == "sin":
            return np.sin(x)
        if op == "cos":
            return np.cos(x)
        if op == "exp":
            return np.exp(x)
        if op == "log":
            _check_domain(x <= 0, "log of non-positive value")
            return np.log(x)
        if op == "tanh":
            return np.tanh(x)
        if op == "relu":
            return np.maximum(x, 0.0)
        return np.abs(x)
    if isinstance(e, Nary):
        vals = [np.asarray(_eval(a, b), dtype=float) for a in e.args]
        fn = np.minimum if e.op == "min" else np.maximum
        out = vals[0]
        for v in vals[1:]:
            out = fn(out, v)
        return out
    x = np.asarray(_eval(e.left, b), dtype=float)
    y = np.asarray(_eval(e.right, b), dtype=float)
    op = e.op
    if op == "+":
        return x + y
    if op == "-":
        return x - y
    if op == "*":
        return x * y
    if op == "/":
        _check_domain(y == 0, "division by zero")
        return x / y
    # power
    if np.ndim(y) == 0 and float(y) == round(float(y)):
        k = float(y)
        if k < 0:
            _check_domain(x == 0, "zero raised to a negative power")
        return np.power(x, k)
    _check_domain(x < 0, "negative base with non-integer exponent")
    if np.any(y < 0):
        _check_domain(x == 0, "zero raised to a negative power")
    return np.power(x, y)


def compile_expr(e: Expr, names: list[str]) -> Callable:
    """Return ``f(*values)`` evaluating ``e`` with positional arguments."""

    def fn(*values):
        return evaluate(e, dict(zip(names, values)))

    return fn


# ---------------------------------------------------------------------------
# Differentiation
# ---------------------------------------------------------------------------


def _add(a: Expr, b: Expr) -> Expr:
    if isinstance(a, Const) and a.value == 0.0:
        return b
    if isinstance(b, Const) and b.value == 0.0:
        return a
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value + b.value)
    return Binary("+", a, b)


def _sub(a: Expr, b: Expr) -> Expr:
    if isinstance(b, Const) and b.value == 0.0:
        return a
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value - b.value)
    if isinstance(a, Const) and a.value == 0.0:
        return _neg(b)
    return Binary("-", a, b)


def _neg(a: Expr) -> Expr:
    if isinstance(a, Const):
        return Const(-a.value)
    return Unary("neg", a)


def _mul(a: Expr, b: Expr) -> Expr:
    for x, y in ((a, b), (b, a)):
        if isinstance(x, Const):
            if x.value == 0.0:
                return Const(0.0)
            if x.value == 1.0:
                return y
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value * b.value)
    return Binary("*", a, b)


def _div(a: Expr, b: Expr) -> Expr:
    if isinstance(a, Const) and a.value == 0.0:
        return Const(0.0)
    if isinstance(b, Const) and b.value == 1.0:
        return a
    return Binary("/", a, b)


def differentiate(e: Expr, var: str) -> Expr:
    """Symbolic derivative of ``e`` with respect to ``var``."""
    if isinstance(e, Const):
        return Const(0.0)
    if isinstance(e, Var):
        return Const(1.0 if e.name == var else 0.0)
    if isinstance(e, Nary):
        raise NonDifferentiableError(f"{e.op} is not differentiable")
    if isinstance(e, Unary):
        if e.op in ("relu", "abs"):
            raise NonDifferentiableError(f"{e.op} is not differentiable")
        du = differentiate(e.arg, var)
        if isinstance(du, Const) and du.value == 0.0:
            return Const(0.0)
        u = e.arg
        if e.op == "neg":
            return _neg(du)
        if e.op == "sin":
            return _mul(Unary("cos", u), du)
        if e.op == "cos":
            return _mul(_neg(Unary("sin", u)), du)
        if e.op == "exp":
            return _mul(Unary("exp", u), du)
        if e.op == "log":
            return _div(du, u)
        # tanh
        return _mul(_sub(Const(1.0), Binary("^", Unary("tanh", u), Const(2.0))), du)
    a, b = e.left, e.right
    if e.op == "+":
        return _add(differentiate(a, var), differentiate(b, var))
    if e.op == "-":
        return _sub(differentiate(a, var), differentiate(b, var))
    if e.op == "*":
        return _add(_mul(differentiate(a, var), b), _mul(a, differentiate(b, var)))
    if e.op == "/":
        da, db = differentiate(a, var), differentiate(b, var)
        if isinstance(db, Const) and db.value == 0.0:
            return _div(da, b)
        num = _sub(_mul(da, b), _mul(a, db))
        return _div(num, Binary("^", b, Const(2.0)))
    # power
    if is_constant(b):
        c = const_value(b)
        da = differentiate(a, var)
        if c == 0.0:
            return Const(0.0)
        inner = Const(1.0) if c == 1.0 else Binary("^", a, Const(c - 1.0))
        return _mul(_mul(Const(c), inner), da)
    if is_constant(a):
        c = const_value(a)
        if c <= 0:
            raise ExprError("constant base of an exponential must be positive")
        return _mul(_mul(Const(math.log(c)), e), differentiate(b, var))
    raise NonDifferentiableError("variable exponent with variable base")


# ---------------------------------------------------------------------------
# Inflection points
# ---------------------------------------------------------------------------


def _periodic_points(offset: float, period: float, lo: float, hi: float) -> list[float]:
    k = math.ceil((lo - offset) / period)
    out = []
    while True:
        p = offset + k * period
        if p >= hi:
            break
        if p > lo:
            out.append(p)
        k += 1
    return out


def find_inflections(tag: str, domain, param: float | None = None) -> list[float]:
    """Points strictly inside ``domain`` where the second derivative changes sign."""
    d = as_interval(domain)
    if not d.is_finite():
        raise ExprError("inflection search needs a finite domain")
    lo, hi = d.lo, d.hi
    if tag == "sin":
        return _periodic_points(0.0, math.pi, lo, hi)
    if tag == "cos":
        return _periodic_points(math.pi / 2, math.pi, lo, hi)
    if tag == "tanh":
        return [0.0] if lo < 0.0 < hi else []
    if tag in ("exp", "log", "cpow", "recip"):
        return []
    if tag == "pow":
        if param is None:
            raise ExprError("pow needs an exponent")
        c = float(param)
        if c == round(c) and c >= 3 and int(c) % 2 == 1 and lo < 0.0 < hi:
            return [0.0]
        return []
    raise ExprError(f"unsupported function {tag!r}")


# ---------------------------------------------------------------------------
# Interval evaluation
# ---------------------------------------------------------------------------


def _linear_range(coeffs, const, domains) -> Interval:
    lo = hi = const
    for name, c in coeffs.items():
        try:
            d = as_interval(domains[name])
        except KeyError:
            raise ExprError(f"no domain for variable {name!r}") from None
        if c >= 0:
            lo += c * d.lo
            hi += c * d.hi
        else:
            lo += c * d.hi
            hi += c * d.lo
    return Interval(lo, hi)


def _trig_range(fn, crit_offset_max: float, crit_offset_min: float, d: Interval) -> Interval:
    if d.width >= 2 * math.pi:
        return Interval(-1.0, 1.0)
    vals = [fn(d.lo), fn(d.hi)]
    hi = 1.0 if _contains_periodic(crit_offset_max, d) else max(vals)
    lo = -1.0 if _contains_periodic(crit_offset_min, d) else min(vals)
    return Interval(lo, hi)


def _contains_periodic(offset: float, d: Interval) -> bool:
    k = math.ceil((d.lo - offset) / (2 * math.pi))
    return offset + k * 2 * math.pi <= d.hi


def unary_range(tag: str, param: float | None, d: Interval) -> Interval:
    """Exact range of a supported univariate function over ``d``."""
    lo, hi = d.lo, d.hi
    if tag == "sin":
        return _trig_range(math.sin, math.pi / 2, -math.pi / 2, d)
    if tag == "cos":
        return _trig_range(math.cos, 0.0, math.pi, d)
    if tag == "exp":
        return Interval(math.exp(lo), math.exp(hi))
    if tag == "log":
        if lo <= 0:
            raise DomainError(f"log over interval touching non-positive values {d}")
        return Interval(math.log(lo), math.log(hi))
    if tag == "tanh":
        return Interval(math.tanh(lo), math.tanh(hi))
    if tag == "recip":
        if lo <= 0.0 <= hi:
            raise DomainError(f"reciprocal over interval containing zero {d}")
        a, b = param / lo, param / hi
        return Interval(min(a, b), max(a, b))
    if tag == "cpow":
        if param <= 0:
            raise DomainError("constant base of an exponential must be positive")
        a, b = param**lo, param**hi
        return Interval(min(a, b), max(a, b))
    if tag == "pow":
        c = float(param)
        integer = c == round(c)
        if not integer and lo < 0:
            raise DomainError(f"non-integer power over negative values {d}")
        if c < 0 and lo <= 0.0 <= hi:
            raise DomainError(f"negative power over interval containing zero {d}")
        pts = [lo, hi]
        if lo < 0.0 < hi:
            pts.append(0.0)
        vals = [_pow(p, c) for p in pts]
        return Interval(min(vals), max(vals))
    raise ExprError(f"unsupported function {tag!r}")


def _pow(x: float, c: float) -> float:
    if x == 0.0 and c < 0:
        return math.inf
    if c == round(c):
        return float(x ** int(c)) if abs(c) < 64 else math.pow(x, c)
    return math.pow(x, c)


def interval_eval(e: Expr, domains: Mapping[str, Interval]) -> Interval:
    """Sound range of ``e`` over the box ``domains`` by interval arithmetic.

    Affine subtrees are ranged exactly through their linear form; monotone
    pieces and even powers use exact range rules.
    """
    lf = linear_form(e)
    if lf is not None:
        return _linear_range(lf[0], lf[1], domains)
    if isinstance(e, Unary):
        d = interval_eval(e.arg, domains)
        if e.op == "neg":
            return Interval(-d.hi, -d.lo)
        if e.op == "relu":
            return Interval(max(d.lo, 0.0), max(d.hi, 0.0))
        if e.op == "abs":
            if d.lo >= 0:
                return d
            if d.hi <= 0:
                return Interval(-d.hi, -d.lo)
            return Interval(0.0, max(-d.lo, d.hi))
        return unary_range(e.op, None, d)
    if isinstance(e, Nary):
        ds = [interval_eval(a, domains) for a in e.args]
        if e.op == "min":
            return Interval(min(d.lo for d in ds), min(d.hi for d in ds))
        return Interval(max(d.lo for d in ds), max(d.hi for d in ds))
    view = unary_view(e)
    if view is not None:
        tag, param, arg = view
        return unary_range(tag, param, interval_eval(arg, domains))
    a = interval_eval(e.left, domains)
    b = interval_eval(e.right, domains)
    if e.op == "+":
        return Interval(a.lo + b.lo, a.hi + b.hi)
    if e.op == "-":
        return Interval(a.lo - b.hi, a.hi - b.lo)
    if e.op == "*":
        prods = [a.lo * b.lo, a.lo * b.hi, a.hi * b.lo, a.hi * b.hi]
        return Interval(min(prods), max(prods))
    if e.op == "/":
        if b.lo <= 0.0 <= b.hi:
            raise DomainError(f"division by interval containing zero {b}")
        qs = [a.lo / b.lo, a.lo / b.hi, a.hi / b.lo, a.hi / b.hi]
        return Interval(min(qs), max(qs))
    if is_constant(e):
        v = const_value(e)
        return Interval(v, v)
    raise ExprError("variable exponent with variable base")


# ---------------------------------------------------------------------------
# Multiplication / division elimination
# ---------------------------------------------------------------------------

DEFAULT_XI = 1e-2


def _shifted(e: Expr, d: Interval, xi: float):
    """Affine map of ``e`` from ``d`` onto ``[xi, 1 + xi]``.

    Returns ``(shifted, scale, offset)`` with ``e == scale * (shifted - xi) + offset``.
    """
    scale = d.hi - d.lo
    shifted = Binary("+", Binary("/", Binary("-", e, Const(d.lo)), Const(scale)), Const(xi))
    return shifted, scale, d.lo


def convert_mul_div(e: Expr, domains: Mapping[str, Interval], xi: float = DEFAULT_XI):
    """Replace products and quotients of non-constant operands by exp/log forms.

    ``x * y`` becomes ``sx*sy*exp(log(x') + log(y'))`` plus the affine
    correction terms, where ``x'`` and ``y'`` are ``x`` and ``y`` mapped
    affinely onto ``[xi, 1 + xi]`` using their interval ranges.  A quotient
    ``x / y`` needs a divisor range excluding zero; the divisor is not shifted
    (only its sign is normalized) and the result is
    ``sx*exp(log(x') - log(y)) + ox*(1/y)`` with the same correction.
    Returns the transformed expression and the (unchanged) domain map.
    """
    if xi <= 0:
        raise ExprError("xi must be positive")
    doms = {k: as_interval(v) for k, v in domains.items()}
    out = _convert(e, doms, xi)
    return out, dict(doms)


def _operand_range(e: Expr, doms) -> Interval:
    d = interval_eval(e, doms)
    if not d.is_finite():
        raise ExprError(f"unbounded operand domain for {to_string(e)}")
    return d


def _convert(e: Expr, doms, xi: float) -> Expr:
    if isinstance(e, (Const, Var)):
        return e
    if isinstance(e, Unary):
        return Unary(e.op, _convert(e.arg, doms, xi))
    if isinstance(e, Nary):
        return Nary(e.op, tuple(_convert(a, doms, xi) for a in e.args))
    left, right = _convert(e.left, doms, xi), _convert(e.right, doms, xi)
    lc, rc = is_constant(left), is_constant(right)
    if e.op == "*" and not lc and not rc:
        return _product(left, right, doms, xi)
    if e.op == "/" and not rc:
        if lc:
            # c / y stays as a reciprocal nonlinearity
            d = _operand_range(right, doms)
            if d.lo <= 0.0 <= d.hi:
                raise ExprError(f"divisor domain {d} includes zero")
            return Binary("/", left, right)
        return _quotient(left, right, doms, xi)
    return Binary(e.op, left, right)


def _product(x: Expr, y: Expr, doms, xi: float) -> Expr:
    dx, dy = _operand_range(x, doms), _operand_range(y, doms)
    if dx.width == 0.0:
        return Binary("*", Const(dx.lo), y)
    if dy.width == 0.0:
        return Binary("*", Const(dy.lo), x)
    xs, sx, ox = _shifted(x, dx, xi)
    ys, sy, oy = _shifted(y, dy, xi)
    # x = sx*(xs - xi) + ox, y = sy*(ys - xi) + oy
    ax, ay = ox - sx * xi, oy - sy * xi  # x = sx*xs + ax
    core = Unary("exp", Binary("+", Unary("log", xs), Unary("log", ys)))
    out: Expr = Binary("*", Const(sx * sy), core)
    out = Binary("+", out, Binary("*", Const(sx * ay), xs))
    out = Binary("+", out, Binary("*", Const(ax * sy), ys))
    return Binary("+", out, Const(ax * ay))


def _quotient(x: Expr, y: Expr, doms, xi: float) -> Expr:
    dy = _operand_range(y, doms)
    if dy.lo <= 0.0 <= dy.hi:
        raise ExprError(f"divisor domain {dy} includes zero")
    if dy.hi < 0:
        return Unary("neg", _quotient(x, Unary("neg", y), doms, xi))
    dx = _operand_range(x, doms)
    if dx.width == 0.0:
        return Binary("/", Const(dx.lo), y)
    xs, sx, ox = _shifted(x, dx, xi)
    ax = ox - sx * xi
    core = Unary("exp", Binary("-", Unary("log", xs), Unary("log", y)))
    out: Expr = Binary("*", Const(sx), core)
    if ax != 0.0:
        out = Binary("+", out, Binary("/", Const(ax), y))
    return out


def has_mul_div(e: Expr) -> bool:
    """True if a product or quotient of two non-constant operands remains."""
    if isinstance(e, Binary):
        if e.op == "*" and not is_constant(e.left) and not is_constant(e.right):
            return True
        if e.op == "/" and not is_constant(e.left) and not is_constant(e.right):
            return True
    return any(has_mul_div(c) for c in children(e))
