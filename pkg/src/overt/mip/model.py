"""Mixed-integer linear problem container and solve results."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np


class MipError(RuntimeError):
    pass


class LinExpr:
    """Sparse affine expression ``sum(coeffs[name] * name) + const``."""

    __slots__ = ("coeffs", "const")

    def __init__(self, coeffs: Mapping[str, float] | None = None, const: float = 0.0):
        self.coeffs = {k: float(v) for k, v in (coeffs or {}).items() if v != 0.0}
        self.const = float(const)

    @classmethod
    def var(cls, name: str) -> LinExpr:
        return cls({name: 1.0})

    @classmethod
    def lift(cls, value) -> LinExpr:
        if isinstance(value, LinExpr):
            return value
        return cls({}, float(value))

    def copy(self) -> LinExpr:
        return LinExpr(self.coeffs, self.const)

    def __add__(self, other):
        other = LinExpr.lift(other)
        out = dict(self.coeffs)
        for k, v in other.coeffs.items():
            out[k] = out.get(k, 0.0) + v
        return LinExpr(out, self.const + other.const)

    __radd__ = __add__

    def __neg__(self):
        return LinExpr({k: -v for k, v in self.coeffs.items()}, -self.const)

    def __sub__(self, other):
        return self + (-LinExpr.lift(other))

    def __rsub__(self, other):
        return LinExpr.lift(other) - self

    def __mul__(self, s):
        if isinstance(s, LinExpr):
            raise TypeError("LinExpr products are not linear")
        s = float(s)
        return LinExpr({k: s * v for k, v in self.coeffs.items()}, s * self.const)

    __rmul__ = __mul__

    def value(self, assignment: Mapping[str, float]) -> float:
        return self.const + math.fsum(v * assignment[k] for k, v in self.coeffs.items())

    def is_constant(self) -> bool:
        return not self.coeffs

    def __repr__(self) -> str:
        terms = " + ".join(f"{v:g}*{k}" for k, v in self.coeffs.items())
        return f"LinExpr({terms or '0'} + {self.const:g})"


@dataclass
class VarInfo:
    lb: float
    ub: float
    binary: bool = False


@dataclass
class Row:
    coeffs: dict
    sense: str  # "<=", ">=", "=="
    rhs: float
    name: str = ""


@dataclass
class MipProblem:
    vars: dict = field(default_factory=dict)
    rows: list = field(default_factory=list)
    objective: LinExpr | None = None
    sense: str = "min"

    def add_var(self, name: str, lb: float, ub: float, binary: bool = False) -> LinExpr:
        if name in self.vars:
            raise MipError(f"duplicate variable {name}")
        lb, ub = float(lb), float(ub)
        if binary:
            lb, ub = max(lb, 0.0), min(ub, 1.0)
        if not (math.isfinite(lb) and math.isfinite(ub)):
            raise MipError(f"variable {name} needs finite bounds, got [{lb}, {ub}]")
        if lb > ub:
            raise MipError(f"variable {name} has empty bounds [{lb}, {ub}]")
        self.vars[name] = VarInfo(lb, ub, binary)
        return LinExpr.var(name)

    def add_binary(self, name: str) -> LinExpr:
        return self.add_var(name, 0.0, 1.0, binary=True)

    def add_constr(self, lhs, sense: str, rhs=0.0, name: str = "") -> None:
        if sense not in ("<=", ">=", "=="):
            raise MipError(f"bad sense {sense!r}")
        expr = LinExpr.lift(lhs) - LinExpr.lift(rhs)
        for k in expr.coeffs:
            if k not in self.vars:
                raise MipError(f"constraint {name or len(self.rows)} uses undeclared {k}")
        self.rows.append(Row(dict(expr.coeffs), sense, -expr.const, name))

    def set_objective(self, expr, sense: str = "min") -> None:
        if sense not in ("min", "max"):
            raise MipError(f"bad objective sense {sense!r}")
        expr = LinExpr.lift(expr)
        for k in expr.coeffs:
            if k not in self.vars:
                raise MipError(f"objective uses undeclared {k}")
        self.objective = expr
        self.sense = sense

    @property
    def n_binaries(self) -> int:
        return sum(1 for v in self.vars.values() if v.binary)

    def copy(self) -> MipProblem:
        return MipProblem(
            {k: VarInfo(v.lb, v.ub, v.binary) for k, v in self.vars.items()},
            [Row(dict(r.coeffs), r.sense, r.rhs, r.name) for r in self.rows],
            self.objective.copy() if self.objective is not None else None,
            self.sense,
        )

    def to_arrays(self):
        """Dense ``(names, c, A, senses, b, lb, ub, is_binary)``; ``c`` in the problem's sense."""
        names = list(self.vars)
        index = {k: i for i, k in enumerate(names)}
        n = len(names)
        A = np.zeros((len(self.rows), n))
        b = np.zeros(len(self.rows))
        senses = []
        for i, r in enumerate(self.rows):
            for k, v in r.coeffs.items():
                A[i, index[k]] += v
            b[i] = r.rhs
            senses.append(r.sense)
        c = np.zeros(n)
        if self.objective is not None:
            for k, v in self.objective.coeffs.items():
                c[index[k]] += v
        lb = np.array([self.vars[k].lb for k in names])
        ub = np.array([self.vars[k].ub for k in names])
        is_bin = np.array([self.vars[k].binary for k in names], dtype=bool)
        return names, c, A, senses, b, lb, ub, is_bin

    def violations(self, assignment: Mapping[str, float], tol: float = 1e-7) -> list[str]:
        """Constraints, bounds and integrality broken by ``assignment`` beyond ``tol``."""
        out = []
        for k, v in self.vars.items():
            x = assignment.get(k)
            if x is None or not math.isfinite(x):
                out.append(f"{k} unassigned")
                continue
            if x < v.lb - tol or x > v.ub + tol:
                out.append(f"{k}={x} outside [{v.lb}, {v.ub}]")
            if v.binary and min(abs(x), abs(x - 1.0)) > tol:
                out.append(f"{k}={x} not binary")
        for i, r in enumerate(self.rows):
            act = math.fsum(c * assignment.get(k, math.nan) for k, c in r.coeffs.items())
            scale = tol * max(1.0, abs(r.rhs))
            if (r.sense == "<=" and act > r.rhs + scale) or (r.sense == ">=" and act < r.rhs - scale) or (
                r.sense == "==" and abs(act - r.rhs) > scale
            ) or math.isnan(act):
                out.append(f"row {r.name or i}: {act} {r.sense} {r.rhs}")
        return out

    def to_lp(self) -> str:
        """CPLEX LP-format text."""

        def fmt(coeffs):
            parts = []
            for k, v in coeffs.items():
                sign = "-" if v < 0 else "+"
                parts.append(f"{sign} {abs(v)!r} {_lp_name(k)}")
            return " ".join(parts) if parts else "0 " + _lp_name(next(iter(self.vars)))

        lines = ["Minimize" if self.sense == "min" else "Maximize"]
        obj = self.objective.coeffs if self.objective is not None else {}
        lines.append(" obj: " + (fmt(obj) if obj else "0 " + _lp_name(next(iter(self.vars)))))
        lines.append("Subject To")
        sense_txt = {"<=": "<=", ">=": ">=", "==": "="}
        for i, r in enumerate(self.rows):
            lines.append(f" c{i}: {fmt(r.coeffs)} {sense_txt[r.sense]} {r.rhs!r}")
        lines.append("Bounds")
        for k, v in self.vars.items():
            lines.append(f" {v.lb!r} <= {_lp_name(k)} <= {v.ub!r}")
        bins = [k for k, v in self.vars.items() if v.binary]
        if bins:
            lines.append("Binaries")
            lines.append(" " + " ".join(_lp_name(k) for k in bins))
        lines.append("End")
        return "\n".join(lines) + "\n"


def _lp_name(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "_." else "_" for ch in name)


@dataclass
class SolveResult:
    """Outcome of an optimization or feasibility query.

    ``bound`` is the certified bound in the problem's own sense: a lower
    bound on the optimum for minimization, an upper bound for maximization.
    """

    status: str  # optimal | feasible | infeasible | bound-only | error
    primal: float | None = None
    bound: float | None = None
    witness: dict | None = None
    nodes: int = 0
    message: str = ""

    @property
    def ok(self) -> bool:
        return self.status in ("optimal", "feasible", "infeasible")
