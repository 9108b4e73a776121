"""Relational overapproximation of discrete-time update functions.

Pipeline per state dimension: products and quotients are eliminated,
the expression is rewritten into a chain of elementary definitions, interval
domains are pushed through the chain, and each nonlinear definition
``v = e(x)`` is replaced by the pair ``v <= UB(x)``, ``v >= LB(x)``.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .bounds1d import ApproxParams, PwlBound, overapprox_unary, to_closed_form
from .expr import (
    Binary,
    Const,
    DomainError,
    Expr,
    ExprError,
    Interval,
    Nary,
    Unary,
    Var,
    affine_expr,
    as_interval,
    convert_mul_div,
    evaluate,
    free_vars,
    interval_eval,
    is_constant,
    const_value,
    linear_form,
    parse,
    substitute,
    to_string,
    unary_view,
)

EQ, LE, GE = "==", "<=", ">="


@dataclass(frozen=True)
class Constraint:
    """``var <kind> rhs``.

    Rows produced by bounding a nonlinearity carry the :class:`PwlBound`, its
    role (``"upper"``/``"lower"``) and the argument variable so that solvers can
    use a dedicated encoding.  ``reserved`` holds the names set aside for the
    bound variables between rewriting and approximation.
    """

    var: str
    kind: str
    rhs: Expr
    bound: PwlBound | None = None
    arg: str | None = None
    reserved: tuple = ()

    def __post_init__(self):
        if self.kind not in (EQ, LE, GE):
            raise ValueError(f"bad constraint kind {self.kind!r}")

    def __str__(self) -> str:
        return f"{self.var} {self.kind} {to_string(self.rhs)}"

    @property
    def is_bound(self) -> bool:
        return self.bound is not None

    def to_dict(self) -> dict:
        out = {"var": self.var, "kind": self.kind, "rhs": to_string(self.rhs)}
        if self.bound is not None:
            out["bound"] = self.bound.to_dict()
            out["arg"] = self.arg
        return out

    @classmethod
    def from_dict(cls, d: Mapping) -> Constraint:
        bound = None
        if d.get("bound") is not None:
            b = d["bound"]
            bound = PwlBound(tuple(b["x"]), tuple(b["y"]), b["side"], b.get("eps", 0.0))
        return cls(d["var"], d["kind"], parse(d["rhs"]), bound, d.get("arg"))


@dataclass
class OverApproximation:
    constraints: list
    domains: dict
    outputs: list
    inputs: list
    params: ApproxParams | None = None

    def variables(self) -> list[str]:
        seen = dict.fromkeys(self.inputs)
        for c in self.constraints:
            seen.setdefault(c.var, None)
            for name in sorted(free_vars(c.rhs)):
                seen.setdefault(name, None)
        return list(seen)

    def nonlinear_count(self) -> int:
        return sum(1 for c in self.constraints if c.is_bound and c.bound.side == "upper")

    def validate(self) -> None:
        """Check definition order and domain coverage."""
        defined = set(self.inputs)
        for c in self.constraints:
            missing = free_vars(c.rhs) - defined
            if missing:
                raise ExprError(f"{c.var} uses undefined {sorted(missing)}")
            defined.add(c.var)
        for name in self.variables():
            if name not in self.domains:
                raise ExprError(f"no domain for {name}")

    def envelope(self, point: Mapping[str, float]) -> dict[str, Interval]:
        """Interval of each output allowed by the relations at a fixed input point.

        Exact when every auxiliary variable is used once; otherwise a sound
        enclosure (interval arithmetic).
        """
        doms: dict[str, Interval] = {k: Interval(float(point[k]), float(point[k])) for k in self.inputs}
        for c in self.constraints:
            val = interval_eval(c.rhs, doms)
            cur = doms.get(c.var, Interval(-math.inf, math.inf))
            if c.kind == EQ:
                doms[c.var] = val
            elif c.kind == LE:
                hi = min(cur.hi, val.hi)
                doms[c.var] = Interval(min(cur.lo, hi), hi)
            else:
                lo = max(cur.lo, val.lo)
                doms[c.var] = Interval(lo, max(cur.hi, lo))
        return {o: doms[o] for o in self.outputs}

    def to_dict(self) -> dict:
        return {
            "inputs": list(self.inputs),
            "outputs": list(self.outputs),
            "params": self.params.to_dict() if self.params else None,
            "constraints": [c.to_dict() for c in self.constraints],
            "domains": {k: [v.lo, v.hi] for k, v in self.domains.items()},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> OverApproximation:
        params = ApproxParams(**d["params"]) if d.get("params") else None
        return cls(
            [Constraint.from_dict(c) for c in d["constraints"]],
            {k: Interval(*v) for k, v in d["domains"].items()},
            list(d["outputs"]),
            list(d["inputs"]),
            params,
        )


# ---------------------------------------------------------------------------
# System descriptions
# ---------------------------------------------------------------------------


@dataclass
class SystemSpec:
    """Discrete-time update ``x' = f(x, u)`` with bound parameters."""

    name: str
    states: list
    controls: list
    updates: list  # one Expr per state, parameters already substituted
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.updates) != len(self.states):
            raise ValueError("need one update per state")
        allowed = set(self.states) | set(self.controls)
        clash = allowed & set(self.params)
        if clash:
            raise ValueError(f"names used both as variables and parameters: {sorted(clash)}")
        ups = []
        for e in self.updates:
            e = parse(e) if isinstance(e, str) else e
            e = substitute(e, {k: float(v) for k, v in self.params.items()})
            extra = free_vars(e) - allowed
            if extra:
                raise ExprError(f"update references undeclared names {sorted(extra)}")
            ups.append(e)
        self.updates = ups

    @property
    def n_states(self) -> int:
        return len(self.states)

    def step(self, x, u) -> np.ndarray:
        """Exact successor; ``x``/``u`` may be ``(dims,)`` or ``(dims, batch)``."""
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        binding = {n: x[i] for i, n in enumerate(self.states)}
        binding.update({n: u[i] for i, n in enumerate(self.controls)})
        out = [np.broadcast_to(evaluate(e, binding), x[0].shape) for e in self.updates]
        return np.array(out, dtype=float)

    @classmethod
    def from_dict(cls, d: Mapping) -> SystemSpec:
        updates = d["updates"]
        if isinstance(updates, Mapping):
            updates = [updates[s] for s in d["states"]]
        return cls(d.get("name", "system"), list(d["states"]), list(d.get("controls", [])), list(updates),
                   dict(d.get("params", {})))

    @classmethod
    def load(cls, path) -> SystemSpec:
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# Rewriting
# ---------------------------------------------------------------------------


class _Namer:
    def __init__(self, prefix: str):
        self.prefix = prefix
        self.k = 0

    def __call__(self) -> str:
        self.k += 1
        return f"{self.prefix}{self.k}"


def _rebuild_unary(tag: str, param, x: Expr) -> Expr:
    if tag == "pow":
        return Binary("^", x, Const(param))
    if tag == "cpow":
        return Binary("^", Const(param), x)
    if tag == "recip":
        return Binary("/", Const(param), x)
    return Unary(tag, x)


def rewrite(e: Expr, prefix: str = "v", namer: _Namer | None = None):
    """Split ``e`` into elementary definitions.

    Returns ``(out, constraints)`` where ``out`` is a variable or constant.
    Each nonlinear definition reserves two names (for its upper and lower
    bound) ahead of its own.
    """
    namer = namer or _Namer(prefix)
    rows: list[Constraint] = []
    out = _rw(e, rows, namer)
    return out, rows


def _rw(e: Expr, rows: list, new) -> Expr:
    if isinstance(e, Var):
        return e
    if isinstance(e, Const):
        return e
    if is_constant(e):
        return Const(const_value(e))
    if linear_form(e) is not None:
        v = new()
        rows.append(Constraint(v, EQ, e))
        return Var(v)
    if isinstance(e, Binary) and e.op in ("+", "-"):
        x = _rw(e.left, rows, new)
        y = _rw(e.right, rows, new)
        v = new()
        rows.append(Constraint(v, EQ, Binary(e.op, x, y)))
        return Var(v)
    view = unary_view(e)
    if view is not None:
        tag, param, arg = view
        x = _rw(arg, rows, new)
        ub, lb, v = new(), new(), new()
        rows.append(Constraint(v, EQ, _rebuild_unary(tag, param, x), reserved=(ub, lb)))
        return Var(v)
    if isinstance(e, Unary) and e.op in ("relu", "abs", "neg"):
        x = _rw(e.arg, rows, new)
        v = new()
        if e.op == "relu":
            rhs = Unary("relu", x)
        elif e.op == "abs":
            rhs = Nary("max", (x, Unary("neg", x)))
        else:
            rhs = Unary("neg", x)
        rows.append(Constraint(v, EQ, rhs))
        return Var(v)
    if isinstance(e, Nary):
        args = tuple(_rw(a, rows, new) for a in e.args)
        v = new()
        rows.append(Constraint(v, EQ, Nary(e.op, args)))
        return Var(v)
    if isinstance(e, Binary) and e.op == "*" and (is_constant(e.left) or is_constant(e.right)):
        if is_constant(e.left):
            rhs = Binary("*", Const(const_value(e.left)), _rw(e.right, rows, new))
        else:
            rhs = Binary("*", _rw(e.left, rows, new), Const(const_value(e.right)))
        v = new()
        rows.append(Constraint(v, EQ, rhs))
        return Var(v)
    if isinstance(e, Binary) and e.op == "/" and is_constant(e.right):
        x = _rw(e.left, rows, new)
        v = new()
        rows.append(Constraint(v, EQ, Binary("/", x, Const(const_value(e.right)))))
        return Var(v)
    if isinstance(e, Binary) and e.op in ("*", "/"):
        raise ExprError(f"product or quotient left in {to_string(e)}; apply convert_mul_div first")
    raise ExprError(f"unsupported expression {to_string(e)}")


def evaluate_chain(constraints: Sequence[Constraint], binding: Mapping[str, float]) -> dict:
    """Evaluate equality rows in order (the rewrite output is functional)."""
    vals = dict(binding)
    for c in constraints:
        if c.kind != EQ:
            raise ExprError("chain evaluation needs equality rows only")
        vals[c.var] = evaluate(c.rhs, vals)
    return vals


# ---------------------------------------------------------------------------
# Domains
# ---------------------------------------------------------------------------


def propagate_ranges(constraints: Sequence[Constraint], seed: Mapping[str, Interval]) -> dict[str, Interval]:
    """Forward interval pass over equality rows; inequality rows tighten."""
    doms = {k: as_interval(v) for k, v in seed.items()}
    for c in constraints:
        missing = free_vars(c.rhs) - doms.keys()
        if missing:
            raise ExprError(f"no domain for {sorted(missing)} when ranging {c.var}")
        val = interval_eval(c.rhs, doms)
        if c.kind == EQ:
            doms[c.var] = val.widen()
        elif c.var in doms:
            cur = doms[c.var]
            lo, hi = (cur.lo, min(cur.hi, val.hi)) if c.kind == LE else (max(cur.lo, val.lo), cur.hi)
            if lo <= hi:
                doms[c.var] = Interval(lo, hi)
    return doms


# ---------------------------------------------------------------------------
# Approximation
# ---------------------------------------------------------------------------


def approximate(constraints: Sequence[Constraint], domains: Mapping[str, Interval],
                params: ApproxParams | None = None, inputs: Iterable[str] = (),
                outputs: Iterable[str] = ()) -> OverApproximation:
    """Replace nonlinear definitions by upper/lower piecewise-linear relations."""
    params = params or ApproxParams()
    rows: list[Constraint] = []
    doms = dict(domains)
    for c in constraints:
        view = unary_view(c.rhs) if c.kind == EQ else None
        if view is None:
            rows.append(c)
            continue
        tag, param, arg = view
        if not isinstance(arg, Var):
            raise ExprError(f"nonlinear row {c} must act on a single variable")
        ub_name, lb_name = c.reserved or (f"{c.var}_ub", f"{c.var}_lb")
        try:
            upper, lower = overapprox_unary(tag, doms[arg.name], params, param)
        except DomainError as exc:
            raise DomainError(f"{c.var} = {to_string(c.rhs)}: {exc}") from exc
        rows.append(Constraint(ub_name, EQ, to_closed_form(upper, arg), upper, arg.name))
        rows.append(Constraint(lb_name, EQ, to_closed_form(lower, arg), lower, arg.name))
        rows.append(Constraint(c.var, LE, Var(ub_name)))
        rows.append(Constraint(c.var, GE, Var(lb_name)))
        doms[ub_name] = upper.range()
        doms[lb_name] = lower.range()
        # keep the (exact, tighter) range already known for v
        if c.var not in doms:
            doms[c.var] = Interval(lower.range().lo, upper.range().hi)
    return OverApproximation(rows, doms, list(outputs), list(inputs), params)


def compact_affine(oa: OverApproximation) -> OverApproximation:
    """Fold single-use affine auxiliaries into their (affine) consumer."""
    rows = list(oa.constraints)
    protected = set(oa.outputs) | set(oa.inputs)
    changed = True
    while changed:
        changed = False
        uses: Counter = Counter()
        for c in rows:
            for name in free_vars(c.rhs):
                uses[name] += 1
        for i, c in enumerate(rows):
            if c.kind != EQ or c.is_bound or c.var in protected or uses[c.var] != 1:
                continue
            lf = linear_form(c.rhs)
            if lf is None:
                continue
            j = next(k for k, r in enumerate(rows) if c.var in free_vars(r.rhs))
            consumer = rows[j]
            if consumer.kind != EQ or consumer.is_bound or linear_form(consumer.rhs) is None:
                continue
            merged = linear_form(substitute(consumer.rhs, {c.var: c.rhs}))
            coeffs = {k: v for k, v in merged[0].items() if v != 0.0}
            rows[j] = Constraint(consumer.var, EQ, affine_expr(coeffs, merged[1]))
            del rows[i]
            changed = True
            break
    live = set(oa.inputs)
    for c in rows:
        live.add(c.var)
        live |= free_vars(c.rhs)
    doms = {k: v for k, v in oa.domains.items() if k in live}
    return OverApproximation(rows, doms, list(oa.outputs), list(oa.inputs), oa.params)


def overapproximate_dynamics(system: SystemSpec, state_box, control_box=None,
                             params: ApproxParams | None = None, compact: bool = True) -> OverApproximation:
    """One-step relational overapproximation of ``system`` over a state/control box."""
    params = params or ApproxParams()
    state_box = [as_interval(d) for d in state_box]
    control_box = [as_interval(d) for d in (control_box or [])]
    if len(state_box) != system.n_states or len(control_box) != len(system.controls):
        raise ValueError("box dimensions do not match the system")
    seed = dict(zip(system.states, state_box))
    seed.update(zip(system.controls, control_box))
    for k, d in seed.items():
        if not d.is_finite():
            raise ExprError(f"unbounded domain for {k}")
    inputs = list(system.states) + list(system.controls)
    rows: list[Constraint] = []
    doms = dict(seed)
    outputs = []
    for i, e in enumerate(system.updates):
        prefix = f"d{i + 1}_v"
        converted, _ = convert_mul_div(e, seed, params.xi)
        namer = _Namer(prefix)
        out, chain = rewrite(converted, namer=namer)
        if not isinstance(out, Var) or out.name in seed:
            v = namer()
            chain.append(Constraint(v, EQ, out))
            out = Var(v)
        chain_doms = propagate_ranges(chain, seed)
        part = approximate(chain, chain_doms, params)
        rows.extend(part.constraints)
        doms.update(part.domains)
        outputs.append(out.name)
    oa = OverApproximation(rows, doms, outputs, inputs, params)
    return compact_affine(oa) if compact else oa
