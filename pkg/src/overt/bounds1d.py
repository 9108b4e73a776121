"""Piecewise-linear upper and lower bounds for univariate functions.

A domain is split at inflection points into regions of constant curvature.
On a convex region the upper bound is a chain of secants whose interior
breakpoints satisfy the equal-slope optimality condition, and the lower bound
is a chain of tangents (built on ``-f``).  Concave regions swap the roles.
Tangent chains with two or more pieces touch ``f`` at the region endpoints
so that bounds from neighbouring regions meet continuously.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .expr import (
    Binary,
    Const,
    DomainError,
    Expr,
    ExprError,
    Interval,
    Nary,
    Var,
    as_interval,
    find_inflections,
)

Fn = Callable[[np.ndarray], np.ndarray]


# ---------------------------------------------------------------------------
# Function registry
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class UnaryFunction:
    tag: str
    param: float | None
    f: Fn = field(repr=False, compare=False)
    df: Fn = field(repr=False, compare=False)
    d2f: Fn = field(repr=False, compare=False)

    def check_domain(self, d: Interval) -> None:
        lo, hi = d.lo, d.hi
        if self.tag == "log" and lo <= 0:
            raise DomainError(f"log needs a positive domain, got {d}")
        if self.tag == "recip" and lo <= 0.0 <= hi:
            raise DomainError(f"c/x needs a domain excluding zero, got {d}")
        if self.tag == "cpow" and self.param <= 0:
            raise DomainError("c^x needs a positive base")
        if self.tag == "pow":
            c = self.param
            if c != round(c) and lo < 0:
                raise DomainError(f"x^{c} needs a non-negative domain, got {d}")
            if c < 0 and lo <= 0.0 <= hi:
                raise DomainError(f"x^{c} needs a domain excluding zero, got {d}")
            if 0 < c < 1 and lo <= 0.0:
                raise DomainError(f"x^{c} has an unbounded slope at zero; domain {d}")

    def inflections(self, d: Interval) -> list[float]:
        return find_inflections(self.tag, d, self.param)


def _pow_fns(c: float):
    def f(x):
        return np.power(x, c)

    def df(x):
        return c * np.power(x, c - 1.0) if c != 1.0 else np.ones_like(np.asarray(x, dtype=float))

    def d2f(x):
        if c in (0.0, 1.0):
            return np.zeros_like(np.asarray(x, dtype=float))
        return c * (c - 1.0) * np.power(x, c - 2.0)

    return f, df, d2f


def get_function(tag: str, param: float | None = None) -> UnaryFunction:
    """Numeric ``f``, ``f'`` and ``f''`` for a supported nonlinearity."""
    if tag == "sin":
        return UnaryFunction(tag, None, np.sin, np.cos, lambda x: -np.sin(x))
    if tag == "cos":
        return UnaryFunction(tag, None, np.cos, lambda x: -np.sin(x), lambda x: -np.cos(x))
    if tag == "exp":
        return UnaryFunction(tag, None, np.exp, np.exp, np.exp)
    if tag == "log":
        return UnaryFunction(tag, None, np.log, lambda x: 1.0 / x, lambda x: -1.0 / (x * x))
    if tag == "tanh":
        return UnaryFunction(
            tag,
            None,
            np.tanh,
            lambda x: 1.0 - np.tanh(x) ** 2,
            lambda x: -2.0 * np.tanh(x) * (1.0 - np.tanh(x) ** 2),
        )
    if param is None:
        raise ExprError(f"{tag} needs a constant parameter")
    c = float(param)
    if tag == "pow":
        return UnaryFunction(tag, c, *_pow_fns(c))
    if tag == "recip":
        return UnaryFunction(tag, c, lambda x: c / x, lambda x: -c / (x * x), lambda x: 2.0 * c / (x * x * x))
    if tag == "cpow":
        lc = math.log(c) if c > 0 else float("nan")
        return UnaryFunction(
            tag, c, lambda x: np.power(c, x), lambda x: lc * np.power(c, x), lambda x: lc * lc * np.power(c, x)
        )
    raise ExprError(f"unsupported function {tag!r}")


# ---------------------------------------------------------------------------
# Bound containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PwlBound:
    """Continuous piecewise-linear function through ``(xs[i], ys[i])``."""

    xs: tuple
    ys: tuple
    side: str = "upper"
    eps: float = 0.0

    def __post_init__(self):
        xs = tuple(float(v) for v in self.xs)
        ys = tuple(float(v) for v in self.ys)
        if len(xs) != len(ys) or len(xs) < 2:
            raise ValueError("a bound needs at least two matching breakpoints")
        if any(b <= a for a, b in zip(xs, xs[1:])):
            raise ValueError("breakpoints must be strictly increasing")
        if self.side not in ("upper", "lower"):
            raise ValueError(f"side must be 'upper' or 'lower', not {self.side!r}")
        object.__setattr__(self, "xs", xs)
        object.__setattr__(self, "ys", ys)

    @property
    def n_segments(self) -> int:
        return len(self.xs) - 1

    @property
    def domain(self) -> Interval:
        return Interval(self.xs[0], self.xs[-1])

    def __call__(self, x):
        return np.interp(x, self.xs, self.ys)

    def slopes(self) -> np.ndarray:
        xs, ys = np.asarray(self.xs), np.asarray(self.ys)
        return np.diff(ys) / np.diff(xs)

    def lines(self) -> list[tuple[float, float]]:
        """Per-segment ``(slope, intercept)`` pairs."""
        out = []
        for i, s in enumerate(self.slopes()):
            out.append((float(s), self.ys[i] - float(s) * self.xs[i]))
        return out

    def is_concave(self, tol: float = 1e-12) -> bool:
        s = self.slopes()
        return bool(np.all(np.diff(s) <= tol * (1.0 + np.abs(s[1:]))))

    def is_convex(self, tol: float = 1e-12) -> bool:
        s = self.slopes()
        return bool(np.all(np.diff(s) >= -tol * (1.0 + np.abs(s[1:]))))

    def shifted(self, eps: float) -> PwlBound:
        sign = 1.0 if self.side == "upper" else -1.0
        return PwlBound(self.xs, tuple(y + sign * eps for y in self.ys), self.side, self.eps + eps)

    def negated(self) -> PwlBound:
        side = "lower" if self.side == "upper" else "upper"
        return PwlBound(self.xs, tuple(-y for y in self.ys), side, self.eps)

    def range(self) -> Interval:
        return Interval(min(self.ys), max(self.ys))

    def to_dict(self) -> dict:
        return {"side": self.side, "eps": self.eps, "x": list(self.xs), "y": list(self.ys)}


@dataclass(frozen=True)
class ApproxParams:
    """Bounding parameters.

    Exactly one of ``n`` (segments per curvature region) and ``rel_error``
    (maximum gap relative to ``max |f|`` over the domain) is used; with
    neither given the 2% error target applies.
    """

    n: int | None = None
    rel_error: float | None = None
    eps: float = 1e-4
    xi: float = 1e-2
    tol: float = 1e-12
    max_n: int = 64
    grid: int = 2048

    def __post_init__(self):
        if self.n is not None and self.rel_error is not None:
            raise ValueError("set either n or rel_error, not both")
        if self.n is None and self.rel_error is None:
            object.__setattr__(self, "rel_error", 0.02)
        if self.n is not None and int(self.n) < 1:
            raise ValueError("n must be a positive integer")
        if self.rel_error is not None and not self.rel_error > 0:
            raise ValueError("rel_error must be positive")
        if self.eps < 0:
            raise ValueError("eps must be non-negative")
        if not self.xi > 0:
            raise ValueError("xi must be positive")

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "rel_error": self.rel_error,
            "eps": self.eps,
            "xi": self.xi,
            "tol": self.tol,
            "max_n": self.max_n,
            "grid": self.grid,
        }


# ---------------------------------------------------------------------------
# Root solving
# ---------------------------------------------------------------------------


def _damped_newton(residual, x0: np.ndarray, lo: float, hi: float, tol: float, max_iter: int = 100):
    """Solve ``residual(x) = 0`` keeping ``lo < x_1 < ... < x_k < hi``.

    Returns ``(x, converged)``.
    """
    x = np.array(x0, dtype=float)
    if x.size == 0:
        return x, True
    width = hi - lo
    r = residual(x)
    norm = np.max(np.abs(r))
    for _ in range(max_iter):
        if norm <= tol:
            return x, True
        h = 1e-7 * width
        jac = np.empty((x.size, x.size))
        for j in range(x.size):
            xp, xm = x.copy(), x.copy()
            xp[j] += h
            xm[j] -= h
            jac[:, j] = (residual(xp) - residual(xm)) / (2 * h)
        try:
            step = np.linalg.solve(jac, -r)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(jac, -r, rcond=None)[0]
        if not np.all(np.isfinite(step)):
            return x, False
        t = 1.0
        accepted = False
        while t > 1e-10:
            cand = x + t * step
            ordered = np.concatenate(([lo], cand, [hi]))
            if np.all(np.diff(ordered) > 0):
                rc = residual(cand)
                nc = np.max(np.abs(rc))
                if np.isfinite(nc) and nc < norm:
                    x, r, norm = cand, rc, nc
                    accepted = True
                    break
            t *= 0.5
        if not accepted:
            break
    return x, bool(norm <= max(tol, 1e3 * tol))


def _residual_scale(f: Fn, df: Fn, a: float, b: float) -> float:
    grid = np.linspace(a, b, 9)
    return 1.0 + float(np.max(np.abs(df(grid))))


def equidistributed(df: Fn, a: float, b: float, n: int, d2f: Fn | None = None) -> np.ndarray:
    """Breakpoints with density proportional to ``sqrt|f''|``, which roughly
    equalizes the per-segment gap; a good Newton start on curved functions."""
    g = np.linspace(a, b, 4097)
    if d2f is not None:
        curv = np.abs(d2f(g))
    else:
        curv = np.abs(np.gradient(df(g), g))
    dens = np.sqrt(curv)
    dens = dens + 1e-3 * (float(np.max(dens)) + 1e-300)
    c = np.concatenate(([0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(g))))
    c /= c[-1]
    xs = np.interp(np.linspace(0.0, 1.0, n + 1), c, g)
    xs[0], xs[-1] = a, b
    if np.any(np.diff(xs) <= 0):
        xs = np.linspace(a, b, n + 1)
    return xs


def secant_residuals(f: Fn, df: Fn, xs: Sequence[float]) -> np.ndarray:
    """``f'(x_i) - (f(x_{i+1}) - f(x_{i-1})) / (x_{i+1} - x_{i-1})`` for interior points."""
    x = np.asarray(xs, dtype=float)
    if x.size < 3:
        return np.zeros(0)
    fx = f(x)
    return df(x[1:-1]) - (fx[2:] - fx[:-2]) / (x[2:] - x[:-2])


def h_intersection(f: Fn, df: Fn, alpha, beta):
    """Abscissa where the tangents at ``alpha`` and ``beta`` intersect."""
    da, db = df(alpha), df(beta)
    return (beta * db - alpha * da) / (db - da) - (f(beta) - f(alpha)) / (db - da)


def tangent_points(xs: Sequence[float]) -> np.ndarray:
    """Tangency abscissae of an endpoint-tangent chain: ``a``, inner midpoints, ``b``."""
    x = np.asarray(xs, dtype=float)
    n = x.size - 1
    if n == 1:
        return np.array([0.5 * (x[0] + x[1])])
    t = 0.5 * (x[:-1] + x[1:])
    t[0] = x[0]
    t[-1] = x[-1]
    return t


def tangent_residuals(f: Fn, df: Fn, xs: Sequence[float]) -> np.ndarray:
    """``x_i - h(t_i, t_{i+1})`` at the interior breakpoints of a tangent chain."""
    x = np.asarray(xs, dtype=float)
    if x.size < 3:
        return np.zeros(0)
    t = tangent_points(x)
    return x[1:-1] - h_intersection(f, df, t[:-1], t[1:])


# ---------------------------------------------------------------------------
# Breakpoint optimization
# ---------------------------------------------------------------------------


def optimize_secant_breakpoints(
    f: Fn, df: Fn, domain, n: int, tol: float = 1e-12, d2f: Fn | None = None
) -> PwlBound:
    """Secant chain upper bound of a convex ``f`` with optimally placed breakpoints.

    The interior points solve ``f'(x_i) = (f(x_{i+1}) - f(x_{i-1})) / (x_{i+1} - x_{i-1})``.
    If the solver fails, the starting spacing is kept (still a valid bound).
    """
    d = as_interval(domain)
    a, b = d.lo, d.hi
    if n < 1:
        raise ValueError("n must be positive")
    xs = equidistributed(df, a, b, n, d2f) if b > a else np.linspace(a, b, n + 1)
    if n > 1 and b > a:
        scale = _residual_scale(f, df, a, b)

        def residual(inner):
            return secant_residuals(f, df, np.concatenate(([a], inner, [b]))) / scale

        inner, ok = _damped_newton(residual, xs[1:-1], a, b, tol)
        if ok:
            xs = np.concatenate(([a], inner, [b]))
    xs[0], xs[-1] = a, b
    return PwlBound(tuple(xs), tuple(float(v) for v in f(xs)), "upper")


def _tangent_line(f: Fn, df: Fn, t: float) -> tuple[float, float]:
    s = float(df(t))
    return s, float(f(t)) - s * t


def optimize_tangent_breakpoints(
    f: Fn, df: Fn, domain, n: int, tol: float = 1e-12, d2f: Fn | None = None
) -> PwlBound:
    """Tangent chain upper bound of a concave ``f``.

    One piece: the tangent at the midpoint.  Two or more pieces: the first
    and last pieces are tangent at the domain endpoints and inner pieces at
    their own midpoints; breakpoints are tangent intersections, found by
    damped Newton.  The result is always passed through
    :func:`repair_continuity`, so an unconverged solve stays sound.
    """
    d = as_interval(domain)
    a, b = d.lo, d.hi
    if n < 1:
        raise ValueError("n must be positive")
    if n == 1 or b == a:
        s, c = _tangent_line(f, df, 0.5 * (a + b))
        return PwlBound((a, b) if b > a else (a, a + 1e-300), (s * a + c, s * b + c), "upper")
    xs = equidistributed(df, a, b, n, d2f)
    scale = _residual_scale(f, df, a, b)

    def continuity(inner):
        x = np.concatenate(([a], inner, [b]))
        t = tangent_points(x)
        xi = x[1:-1]
        left = df(t[:-1]) * (xi - t[:-1]) + f(t[:-1])
        right = df(t[1:]) * (xi - t[1:]) + f(t[1:])
        return (left - right) / scale

    if n == 2:
        # both pieces are endpoint tangents: the breakpoint is their intersection
        with np.errstate(divide="ignore", invalid="ignore"):
            x1 = float(h_intersection(f, df, a, b))
        if a < x1 < b and np.isfinite(x1):
            xs[1] = x1
    else:
        inner, ok = _damped_newton(continuity, xs[1:-1], a, b, tol)
        if ok:
            xs[1:-1] = inner
    xs[0], xs[-1] = a, b
    t = tangent_points(xs)
    pieces = [_tangent_line(f, df, float(ti)) for ti in t]
    draft = PwlBound(tuple(xs), tuple(np.zeros(n + 1)), "upper")
    return repair_continuity(draft, pieces)


def repair_continuity(b: PwlBound, pieces: Sequence[tuple[float, float]]) -> PwlBound:
    """Rebuild breakpoint values from per-segment lines ``(slope, intercept)``.

    Interior values take the max of the two adjacent lines for upper bounds
    (min for lower bounds); each segment only moves away from the function.
    """
    xs = b.xs
    if len(pieces) != len(xs) - 1:
        raise ValueError("need one line per segment")
    pick = max if b.side == "upper" else min
    ys = [pieces[0][0] * xs[0] + pieces[0][1]]
    for i in range(1, len(xs) - 1):
        left = pieces[i - 1][0] * xs[i] + pieces[i - 1][1]
        right = pieces[i][0] * xs[i] + pieces[i][1]
        ys.append(pick(left, right))
    ys.append(pieces[-1][0] * xs[-1] + pieces[-1][1])
    return PwlBound(xs, tuple(ys), b.side, b.eps)


# ---------------------------------------------------------------------------
# Whole-domain bounds
# ---------------------------------------------------------------------------


def curvature_sign(fn: UnaryFunction, a: float, b: float) -> int:
    """Sign of ``f''`` on a region known to have constant curvature."""
    pts = np.linspace(a, b, 7)[1:-1]
    vals = fn.d2f(pts)
    k = int(np.argmax(np.abs(vals)))
    v = float(vals[k])
    scale = float(np.max(np.abs(fn.f(pts)))) + 1.0
    if abs(v) <= 1e-14 * scale:
        return 0
    return 1 if v > 0 else -1


def _region_bound(fn: UnaryFunction, a: float, b: float, n: int, side: str, sign: int, tol: float) -> PwlBound:
    """Unshifted bound for one constant-curvature region."""
    if sign == 0:
        xs = (a, b)
        return PwlBound(xs, tuple(float(v) for v in fn.f(np.array(xs))), side)
    if (side == "upper") == (sign < 0):
        # tangent chain on whichever of f, -f is concave
        if side == "upper":
            return optimize_tangent_breakpoints(fn.f, fn.df, (a, b), n, tol, fn.d2f)
        neg = optimize_tangent_breakpoints(lambda x: -fn.f(x), lambda x: -fn.df(x), (a, b), n, tol, fn.d2f)
        return neg.negated()
    if side == "upper":
        return optimize_secant_breakpoints(fn.f, fn.df, (a, b), n, tol, fn.d2f)
    neg = optimize_secant_breakpoints(lambda x: -fn.f(x), lambda x: -fn.df(x), (a, b), n, tol, fn.d2f)
    return neg.negated()


def _max_gap(fn: UnaryFunction, b: PwlBound, grid: int) -> float:
    x = np.linspace(b.xs[0], b.xs[-1], grid)
    return float(np.max(np.abs(b(x) - fn.f(x))))


def _join(parts: Sequence[PwlBound], side: str) -> PwlBound:
    xs: list[float] = list(parts[0].xs)
    ys: list[float] = list(parts[0].ys)
    pick = max if side == "upper" else min
    for p in parts[1:]:
        ys[-1] = pick(ys[-1], p.ys[0])
        xs.extend(p.xs[1:])
        ys.extend(p.ys[1:])
    return PwlBound(tuple(xs), tuple(ys), side)


def regions(fn: UnaryFunction, d: Interval) -> list[tuple[float, float]]:
    cuts = [d.lo] + [p for p in fn.inflections(d)] + [d.hi]
    return [(a, b) for a, b in zip(cuts, cuts[1:]) if b > a]


def bound_function(fn: UnaryFunction, domain, params: ApproxParams) -> tuple[PwlBound, PwlBound]:
    d = as_interval(domain)
    if not d.is_finite():
        raise ExprError("bounding needs a finite domain")
    fn.check_domain(d)
    if d.width == 0.0:
        v = float(fn.f(np.array(d.lo)))
        pad = max(abs(d.lo), 1.0) * 1e-12
        xs = (d.lo - pad, d.hi + pad)
        slope = abs(float(fn.df(np.array(d.lo)))) * pad
        up = PwlBound(xs, (v + slope, v + slope), "upper")
        lo = PwlBound(xs, (v - slope, v - slope), "lower")
        return up.shifted(params.eps), lo.shifted(params.eps)
    grid_x = np.linspace(d.lo, d.hi, params.grid)
    scale = max(float(np.max(np.abs(fn.f(grid_x)))), 1e-12)
    out = []
    for side in ("upper", "lower"):
        parts = []
        for a, b in regions(fn, d):
            sign = curvature_sign(fn, a, b)
            if params.n is not None:
                part = _region_bound(fn, a, b, int(params.n), side, sign, params.tol)
            else:
                n = 1
                while True:
                    part = _region_bound(fn, a, b, n, side, sign, params.tol)
                    if sign == 0 or n >= params.max_n:
                        break
                    if _max_gap(fn, part, params.grid) <= params.rel_error * scale:
                        break
                    n = min(2 * n, params.max_n)
            parts.append(part)
        out.append(_join(parts, side).shifted(params.eps))
    return out[0], out[1]


def overapprox_unary(tag: str, domain, params: ApproxParams | None = None, param: float | None = None):
    """Upper and lower piecewise-linear bounds of a supported function over ``domain``."""
    params = params or ApproxParams()
    return bound_function(get_function(tag, param), domain, params)


# ---------------------------------------------------------------------------
# Closed form
# ---------------------------------------------------------------------------


def _ramp(arg: Expr, anchor: float, denom: float) -> Expr:
    return Binary("/", Binary("-", arg, Const(anchor)), Const(denom))


def basis_function(xs: Sequence[float], i: int, arg: Expr | None = None) -> Expr:
    """Hat function equal to 1 at ``xs[i]`` and 0 at every other breakpoint."""
    arg = arg if arg is not None else Var("x")
    n = len(xs) - 1
    zero = Const(0.0)
    if i == 0:
        return Nary("max", (zero, _ramp(arg, xs[1], xs[0] - xs[1])))
    if i == n:
        return Nary("max", (zero, _ramp(arg, xs[n - 1], xs[n] - xs[n - 1])))
    left = _ramp(arg, xs[i - 1], xs[i] - xs[i - 1])
    right = _ramp(arg, xs[i + 1], xs[i] - xs[i + 1])
    return Nary("max", (zero, Nary("min", (left, right))))


def to_closed_form(b: PwlBound, arg: Expr | None = None) -> Expr:
    """``sum_i y_i * beta_i(x)`` built only from affine, min and max nodes."""
    arg = arg if arg is not None else Var("x")
    xs, ys = b.xs, b.ys
    if len(set(xs)) != len(xs):
        raise ValueError("duplicate breakpoints")
    out: Expr | None = None
    for i, y in enumerate(ys):
        term = Binary("*", Const(y), basis_function(xs, i, arg))
        out = term if out is None else Binary("+", out, term)
    return out
