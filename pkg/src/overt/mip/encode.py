"""MIP encodings for networks, piecewise-linear bounds and unrolled closed loops.

Big-M constants always come from the interval of the operand they guard.
Affine expressions are carried as LinExpr and never get their own variable,
so stable neurons cost nothing.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

from ..bounds1d import ApproxParams, PwlBound, overapprox_unary
from ..expr import (
    Binary,
    Expr,
    ExprError,
    Interval,
    Nary,
    Unary,
    Var,
    as_interval,
    const_value,
    free_vars,
    interval_eval,
    is_constant,
    linear_form,
)
from ..nn import Network, NetworkError, neuron_bounds
from ..overapprox import EQ, GE, LE, OverApproximation
from .model import LinExpr, MipError, MipProblem
from .solvers import get_solver


def _check_interval(iv: Interval, what: str) -> Interval:
    iv = as_interval(iv)
    if not iv.is_finite():
        raise MipError(f"unbounded operand in {what}: {iv}")
    return iv


def _dominated(intervals: Sequence[Interval]) -> list[int]:
    """Indices that can attain the maximum; ties between equal constants keep the first."""
    keep = []
    for i, a in enumerate(intervals):
        dom = False
        for j, b in enumerate(intervals):
            if j != i and b.lo >= a.hi and not (a.lo >= b.hi and i < j):
                dom = True
                break
        if not dom:
            keep.append(i)
    return keep


def encode_pwl(p: MipProblem, kind: str, operands: Sequence, intervals: Sequence, name: str):
    """Exact encoding of relu / max / min; returns ``(output, binary names)``."""
    ops = [LinExpr.lift(o) for o in operands]
    ivs = [_check_interval(iv, f"{kind} {name}") for iv in intervals]
    if len(ops) != len(ivs) or not ops:
        raise MipError(f"{kind} {name}: operands and intervals do not match")
    if kind == "relu":
        if len(ops) != 1:
            raise MipError("relu takes one operand")
        (z,), (iv,) = ops, ivs
        if iv.hi <= 0.0:
            return LinExpr(), []
        if iv.lo >= 0.0:
            return z, []
        y = p.add_var(name, 0.0, iv.hi)
        d = p.add_binary(name + ":d")
        p.add_constr(y, ">=", z)
        p.add_constr(y, "<=", iv.hi * d)
        p.add_constr(y, "<=", z - iv.lo * (1 - d))
        return y, [name + ":d"]
    if kind == "min":
        out, bins = encode_pwl(p, "max", [-o for o in ops], [Interval(-iv.hi, -iv.lo) for iv in ivs], name)
        return -out, bins
    if kind != "max":
        raise MipError(f"unknown piecewise-linear kind {kind!r}")
    keep = _dominated(ivs)
    if len(keep) == 1:
        return ops[keep[0]], []
    ops = [ops[i] for i in keep]
    ivs = [ivs[i] for i in keep]
    top = max(iv.hi for iv in ivs)
    y = p.add_var(name, max(iv.lo for iv in ivs), top)
    bins = []
    total = LinExpr()
    for i, (x, iv) in enumerate(zip(ops, ivs)):
        dn = f"{name}:d{i}"
        d = p.add_binary(dn)
        bins.append(dn)
        total = total + d
        p.add_constr(y, ">=", x)
        p.add_constr(y, "<=", x + (top - iv.lo) * (1 - d))
    p.add_constr(total, "==", 1.0)
    return y, bins


def encode_bound_relation(p: MipProblem, bound: PwlBound, x, y, relation: str, name: str) -> list:
    """Encode ``y <relation> g(x)`` for a PWL ``g``; returns the binaries used.

    A concave ``g`` under ``<=`` (convex under ``>=``) is a plain intersection
    of half-planes. Everything else uses the convex-combination form with
    one binary per segment, which also confines ``x`` to the breakpoint range.
    """
    x, y = LinExpr.lift(x), LinExpr.lift(y)
    if relation not in ("<=", ">=", "=="):
        raise MipError(f"bad relation {relation!r}")
    lines = bound.lines()
    if len(lines) == 1:
        s, c = lines[0]
        p.add_constr(y, relation, s * x + c)
        return []
    if (relation == "<=" and bound.is_concave()) or (relation == ">=" and bound.is_convex()):
        for s, c in lines:
            p.add_constr(y, relation, s * x + c)
        return []
    n = bound.n_segments
    lam = [p.add_var(f"{name}:l{i}", 0.0, 1.0) for i in range(n + 1)]
    seg = [p.add_binary(f"{name}:z{k}") for k in range(n)]
    p.add_constr(sum(lam, LinExpr()), "==", 1.0)
    p.add_constr(sum(seg, LinExpr()), "==", 1.0)
    p.add_constr(x, "==", sum((xi * l for xi, l in zip(bound.xs, lam)), LinExpr()))
    p.add_constr(y, relation, sum((yi * l for yi, l in zip(bound.ys, lam)), LinExpr()))
    for i in range(n + 1):
        adj = LinExpr()
        if i > 0:
            adj = adj + seg[i - 1]
        if i < n:
            adj = adj + seg[i]
        p.add_constr(lam[i], "<=", adj)
    return [f"{name}:z{k}" for k in range(n)]


class _Names:
    def __init__(self, prefix: str):
        self.prefix = prefix
        self.k = 0

    def __call__(self, tag: str = "a") -> str:
        self.k += 1
        return f"{self.prefix}{tag}{self.k}"


def encode_expr(p: MipProblem, e: Expr, env: Mapping[str, LinExpr], domains: Mapping[str, Interval], names) -> LinExpr:
    """Encode a piecewise-linear expression (affine, relu, neg, min, max, scaling)."""
    lf = linear_form(e)
    if lf is not None:
        coeffs, const = lf
        out = LinExpr({}, const)
        for k, v in coeffs.items():
            out = out + v * env[k]
        return out
    if isinstance(e, Unary) and e.op == "neg":
        return -encode_expr(p, e.arg, env, domains, names)
    if isinstance(e, Unary) and e.op in ("relu", "abs"):
        z = encode_expr(p, e.arg, env, domains, names)
        iv = interval_eval(e.arg, domains)
        if e.op == "relu":
            return encode_pwl(p, "relu", [z], [iv], names("relu"))[0]
        return encode_pwl(p, "max", [z, -z], [iv, Interval(-iv.hi, -iv.lo)], names("abs"))[0]
    if isinstance(e, Nary):
        ops = [encode_expr(p, a, env, domains, names) for a in e.args]
        ivs = [interval_eval(a, domains) for a in e.args]
        return encode_pwl(p, e.op, ops, ivs, names(e.op))[0]
    if isinstance(e, Binary) and e.op in ("+", "-"):
        a = encode_expr(p, e.left, env, domains, names)
        b = encode_expr(p, e.right, env, domains, names)
        return a + b if e.op == "+" else a - b
    if isinstance(e, Binary) and e.op == "*" and is_constant(e.left):
        return const_value(e.left) * encode_expr(p, e.right, env, domains, names)
    if isinstance(e, Binary) and e.op == "*" and is_constant(e.right):
        return const_value(e.right) * encode_expr(p, e.left, env, domains, names)
    if isinstance(e, Binary) and e.op == "/" and is_constant(e.right):
        return (1.0 / const_value(e.right)) * encode_expr(p, e.left, env, domains, names)
    raise ExprError(f"expression is not piecewise linear: {e}")


def encode_network(p: MipProblem, net: Network, inputs: Sequence, box, prefix: str = "nn:",
                   allow_tanh: bool = False, tanh_params: ApproxParams | None = None) -> list[LinExpr]:
    """Tie ``inputs`` (LinExprs over ``box``) to the network outputs."""
    if len(inputs) != net.n_in:
        raise NetworkError(f"network expects {net.n_in} inputs, got {len(inputs)}")
    if net.has_tanh and not allow_tanh:
        raise NetworkError("tanh layers need allow_tanh=True (encoded through piecewise-linear bounds)")
    nb = neuron_bounds(net, box)
    h = [LinExpr.lift(x) for x in inputs]
    for li, layer in enumerate(net.layers):
        pre = []
        for k in range(layer.n_out):
            acc = LinExpr({}, float(layer.bias[k]))
            for j, w in enumerate(layer.weights[k]):
                if w != 0.0:
                    acc = acc + float(w) * h[j]
            pre.append(acc)
        ivs = nb.layer(li)
        if layer.activation == "linear":
            h = pre
        elif layer.activation == "relu":
            h = [encode_pwl(p, "relu", [z], [iv], f"{prefix}L{li}N{k}")[0] for k, (z, iv) in enumerate(zip(pre, ivs))]
        else:
            h = [_encode_tanh(p, z, iv, f"{prefix}L{li}N{k}", tanh_params) for k, (z, iv) in enumerate(zip(pre, ivs))]
    return h


def _encode_tanh(p: MipProblem, z: LinExpr, iv: Interval, name: str, params: ApproxParams | None) -> LinExpr:
    upper, lower = overapprox_unary("tanh", iv, params)
    lo = max(-1.0, lower.range().lo)
    hi = min(1.0, upper.range().hi)
    t = p.add_var(name, min(lo, hi), max(lo, hi))
    encode_bound_relation(p, upper, z, t, "<=", name + ":ub")
    encode_bound_relation(p, lower, z, t, ">=", name + ":lb")
    return t


def _bound_roles(oa: OverApproximation) -> dict:
    """For each bound row, the relaxed relation allowed by how its var is used."""
    roles = {}
    uses: dict[str, list] = {}
    for c in oa.constraints:
        for name in free_vars(c.rhs):
            uses.setdefault(name, []).append(c)
    for c in oa.constraints:
        if not c.is_bound:
            continue
        rel = EQ
        users = uses.get(c.var, [])
        if c.var not in oa.outputs and users and all(isinstance(u.rhs, Var) for u in users):
            kinds = {u.kind for u in users}
            # "w <= v_ub" only needs v_ub <= g; "w >= v_lb" only needs v_lb >= g
            if kinds == {LE}:
                rel = LE
            elif kinds == {GE}:
                rel = GE
        roles[c.var] = rel
    return roles


def encode_overapprox(p: MipProblem, oa: OverApproximation, env: dict, prefix: str,
                      domains: Mapping[str, Interval] | None = None) -> dict:
    """Add the rows of ``oa``; ``env`` maps its inputs to LinExprs and is extended in place."""
    doms = dict(oa.domains)
    if domains:
        doms.update(domains)
    roles = _bound_roles(oa)
    names = _Names(prefix)
    for c in oa.constraints:
        if c.is_bound:
            d = doms[c.var]
            y = p.add_var(prefix + c.var, d.lo, d.hi)
            env[c.var] = y
            encode_bound_relation(p, c.bound, env[c.arg], y, roles[c.var], prefix + c.var)
            continue
        rhs = encode_expr(p, c.rhs, env, doms, names)
        if c.kind == EQ:
            d = doms[c.var]
            v = p.add_var(prefix + c.var, d.lo, d.hi)
            p.add_constr(v, "==", rhs)
            env[c.var] = v
        else:
            if c.var not in env:
                # the bounded var itself is introduced by its first inequality
                d = doms[c.var]
                env[c.var] = p.add_var(prefix + c.var, d.lo, d.hi)
            p.add_constr(env[c.var], c.kind, rhs)
    return env


# ---------------------------------------------------------------------------
# Closed-loop queries
# ---------------------------------------------------------------------------


@dataclass
class Query:
    problem: MipProblem
    states: list  # per timestep, variable names of the state vector
    controls: list = field(default_factory=list)


def _atom_expr(coeffs: Mapping, state_names: Sequence[str], state_vars: Sequence[str]) -> LinExpr:
    index = dict(zip(state_names, state_vars))
    out = LinExpr()
    for k, v in coeffs.items():
        if isinstance(k, int):
            out = out + v * LinExpr.var(state_vars[k])
        else:
            out = out + v * LinExpr.var(index[k])
    return out


def _tighten(p: MipProblem, name: str, iv: Interval, what: str) -> None:
    info = p.vars[name]
    lo, hi = max(info.lb, iv.lo), min(info.ub, iv.hi)
    if lo > hi:
        raise MipError(f"inconsistent domains for {what}: [{info.lb}, {info.ub}] and {iv}")
    info.lb, info.ub = lo, hi


def build_query(approximations: Sequence[OverApproximation], net: Network | None, input_box,
                objective=None, negated=None, states: Sequence[str] | None = None,
                input_constraints=(), allow_tanh: bool = False) -> Query:
    """Unroll ``len(approximations)`` steps from ``input_box``.

    ``objective`` is ``("max" | "min", k)`` on the final state (k an index or
    state name). ``negated`` is a conjunction of ``(coeffs, sense, rhs)``
    atoms on the final state; with it and no objective the query is a
    feasibility problem. ``net=None`` leaves controls free in their domains.
    """
    box = [as_interval(d) for d in input_box]
    if approximations:
        n_s = len(box)
        state_names = list(approximations[0].inputs[:n_s])
    elif states is not None:
        state_names = list(states)
    else:
        raise MipError("horizon 0 needs explicit state names")
    if len(state_names) != len(box):
        raise MipError("input box does not match the state dimension")
    p = MipProblem()
    cur = [f"t0:{s}" for s in state_names]
    for name, iv in zip(cur, box):
        p.add_var(name, iv.lo, iv.hi)
    for coeffs, sense, rhs in input_constraints:
        p.add_constr(_atom_expr(coeffs, state_names, cur), sense, rhs)
    all_states = [list(cur)]
    all_controls = []
    for t, oa in enumerate(approximations):
        if list(oa.inputs[: len(state_names)]) != state_names:
            raise MipError(f"step {t} approximation has different state names")
        for name, s in zip(cur, state_names):
            _tighten(p, name, oa.domains[s], f"{s} at step {t}")
        controls = list(oa.inputs[len(state_names):])
        env = {s: LinExpr.var(v) for s, v in zip(state_names, cur)}
        step_box = [Interval(p.vars[v].lb, p.vars[v].ub) for v in cur]
        uvars = []
        if controls:
            outs = None
            if net is not None:
                if net.n_out != len(controls) or net.n_in != len(state_names):
                    raise MipError("network dimensions do not match the system")
                outs = encode_network(p, net, [env[s] for s in state_names], step_box, f"t{t}:nn:", allow_tanh)
            for k, u in enumerate(controls):
                d = oa.domains[u]
                uv = p.add_var(f"t{t}:{u}", d.lo, d.hi)
                if outs is not None:
                    p.add_constr(uv, "==", outs[k])
                env[u] = uv
                uvars.append(f"t{t}:{u}")
        all_controls.append(uvars)
        encode_overapprox(p, oa, env, f"t{t}:")
        nxt = []
        for s, o in zip(state_names, oa.outputs):
            expr = env[o]
            (name,) = expr.coeffs
            nxt.append(name)
        cur = nxt
        all_states.append(list(cur))
    if objective is not None:
        sense, k = objective
        idx = state_names.index(k) if isinstance(k, str) else int(k)
        p.set_objective(LinExpr.var(cur[idx]), sense)
    for coeffs, sense, rhs in negated or ():
        p.add_constr(_atom_expr(coeffs, state_names, cur), sense, rhs)
    return Query(p, all_states, all_controls)


def network_output_range(net: Network, box, solver=None) -> list[Interval]:
    """Exact per-output range; ends are the solver's certified bounds."""
    box = [as_interval(d) for d in box]
    solver = get_solver(solver)
    coarse = neuron_bounds(net, box).layer(len(net.layers) - 1)
    out = []
    for k in range(net.n_out):
        ends = []
        for sense in ("min", "max"):
            p = MipProblem()
            xs = [p.add_var(f"x{i}", iv.lo, iv.hi) for i, iv in enumerate(box)]
            y = encode_network(p, net, xs, box)[k]
            p.set_objective(y, sense)
            res = solver.optimize(p)
            if res.bound is None or res.status not in ("optimal", "bound-only"):
                raise MipError(f"output range solve failed: {res.status} {res.message}")
            ends.append(res.bound)
        # both enclosures are sound; the certified-bound shave can poke past the interval one
        lo, hi = max(ends[0], coarse[k].lo), min(ends[1], coarse[k].hi)
        out.append(Interval(min(lo, hi), max(lo, hi)))
    return out
