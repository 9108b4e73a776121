import numpy as np
import pytest

from oracles import pattern_extremes, random_relu_layers
from overt.bounds1d import PwlBound, overapprox_unary, to_closed_form
from overt.expr import Interval, Var
from overt.mip import (
    HighsSolver,
    LinExpr,
    MipError,
    MipProblem,
    ReferenceSolver,
    build_query,
    check_feasible,
    encode_bound_relation,
    encode_expr,
    encode_network,
    encode_pwl,
    get_solver,
    optimize,
)
from overt.mip.lp import BoxedLP
from overt.nn import Layer, Network, forward
from overt.overapprox import SystemSpec, overapproximate_dynamics

ABS = Network((Layer([[1.0], [-1.0]], [0.0, 0.0], "relu"), Layer([[1.0, 1.0]], [0.0], "linear")))
IDENTITY = Network((Layer([[1.0]], [0.0], "linear"),))
PEND = SystemSpec("pendulum", ["x1", "x2"], ["u"], ["x1 + 0.1*x2", "x2 + 0.1*(2*sin(x1) + 8*u)"])
ZERO_CTRL = Network((Layer([[0.0, 0.0]], [0.0], "linear"),))


def net_from(layers):
    return Network(tuple(Layer(w, b, a) for w, b, a in layers))


# ---------------------------------------------------------------------------
# model


def test_linexpr_arithmetic():
    a = LinExpr.var("x") * 2 + 1
    b = 3 - LinExpr.var("y")
    e = a - b
    assert e.coeffs == {"x": 2.0, "y": 1.0} and e.const == -2.0
    assert e.value({"x": 1.0, "y": 2.0}) == 2.0
    assert (a - a).is_constant()
    with pytest.raises(TypeError):
        a * b


def test_problem_validation():
    p = MipProblem()
    p.add_var("x", 0, 1)
    with pytest.raises(MipError):
        p.add_var("x", 0, 1)
    with pytest.raises(MipError):
        p.add_var("y", 0, float("inf"))
    with pytest.raises(MipError):
        p.add_constr(LinExpr.var("z"), "<=", 1)
    with pytest.raises(MipError):
        p.add_constr(LinExpr.var("x"), "<", 1)


def test_lp_export():
    p = MipProblem()
    x = p.add_var("t0:x", -1, 2)
    d = p.add_binary("d")
    p.add_constr(x + 2 * d, "<=", 2.5)
    p.set_objective(x, "max")
    text = p.to_lp()
    assert text.startswith("Maximize")
    for section in ("Subject To", "Bounds", "Binaries", "End"):
        assert section in text
    assert "t0_x" in text and ":" not in text.split("Subject To")[1].replace("c0:", "")


def test_violations_reports():
    p = MipProblem()
    x = p.add_var("x", 0, 1)
    d = p.add_binary("d")
    p.add_constr(x, ">=", d)
    assert p.violations({"x": 0.5, "d": 0.0}) == []
    assert len(p.violations({"x": 0.5, "d": 1.0})) == 1
    assert len(p.violations({"x": 2.0, "d": 0.5})) == 2


# ---------------------------------------------------------------------------
# LP engine against scipy's HiGHS


def _random_lp(rng):
    m, n = rng.integers(1, 25), rng.integers(1, 25)
    A = rng.normal(size=(m, n))
    A[rng.random((m, n)) < 0.5] = 0
    lb = rng.uniform(-3, 0, n)
    ub = lb + rng.uniform(0, 4, n)
    x0 = rng.uniform(lb, ub)
    senses = rng.choice(["<=", ">=", "=="], m, p=[0.45, 0.45, 0.1])
    slack = rng.uniform(-0.5, 1, m) * (senses != "==")
    b = A @ x0 + np.where(senses == "<=", 1, -1) * slack
    return A, list(senses), b, rng.normal(size=n), lb, ub


def _scipy_lp(A, senses, b, c, lb, ub):
    from scipy.optimize import linprog

    a_ub = [A[i] if s == "<=" else -A[i] for i, s in enumerate(senses) if s != "=="]
    b_ub = [b[i] if s == "<=" else -b[i] for i, s in enumerate(senses) if s != "=="]
    a_eq = [A[i] for i, s in enumerate(senses) if s == "=="]
    b_eq = [b[i] for i, s in enumerate(senses) if s == "=="]
    return linprog(c, A_ub=np.array(a_ub) if a_ub else None, b_ub=b_ub or None,
                   A_eq=np.array(a_eq) if a_eq else None, b_eq=b_eq or None,
                   bounds=list(zip(lb, ub)), method="highs")


def test_lp_matches_linprog():
    rng = np.random.default_rng(11)
    infeasible = 0
    for _ in range(200):
        A, senses, b, c, lb, ub = _random_lp(rng)
        got = BoxedLP(A, senses, b, c, lb, ub).solve()
        ref = _scipy_lp(A, senses, b, c, lb, ub)
        if ref.status == 2:
            infeasible += 1
            assert got.status == "infeasible"
        else:
            assert got.status == "optimal"
            assert got.obj == pytest.approx(ref.fun, abs=1e-7)
            assert got.bound <= ref.fun + 1e-9
            assert got.bound >= ref.fun - 1e-6
    assert infeasible > 10


def test_lp_warm_start_after_bound_change():
    rng = np.random.default_rng(12)
    for _ in range(50):
        A, senses, b, c, lb, ub = _random_lp(rng)
        lp = BoxedLP(A, senses, b, c, lb, ub)
        root = lp.solve()
        if root.status != "optimal":
            continue
        lb2, ub2 = lb.copy(), ub.copy()
        j = rng.integers(len(lb))
        ub2[j] = lb2[j] = rng.uniform(lb[j], ub[j])
        warm = lp.solve(lb2, ub2, root.basis)
        cold = lp.solve(lb2, ub2)
        assert warm.status == cold.status
        if warm.status == "optimal":
            assert warm.obj == pytest.approx(cold.obj, abs=1e-7)


# ---------------------------------------------------------------------------
# piecewise-linear encodings


def test_relu_passthrough():
    p = MipProblem()
    z = p.add_var("z", 1, 3)
    y, bins = encode_pwl(p, "relu", [z], [Interval(1, 3)], "r")
    assert bins == [] and y.coeffs == {"z": 1.0}


def test_relu_inactive():
    p = MipProblem()
    z = p.add_var("z", -3, -1)
    y, bins = encode_pwl(p, "relu", [z], [Interval(-3, -1)], "r")
    assert bins == [] and y.is_constant() and y.const == 0.0


def test_relu_one_binary_range():
    for sense, want in (("max", 2.0), ("min", 0.0)):
        p = MipProblem()
        z = p.add_var("z", -1, 2)
        y, bins = encode_pwl(p, "relu", [z], [Interval(-1, 2)], "r")
        assert len(bins) == 1
        p.set_objective(y, sense)
        res = optimize(p)
        assert res.status == "optimal" and res.primal == pytest.approx(want, abs=1e-9)


def test_max_dominance():
    p = MipProblem()
    x = p.add_var("x", 0, 1)
    y = p.add_var("y", 2, 3)
    out, bins = encode_pwl(p, "max", [x, y], [Interval(0, 1), Interval(2, 3)], "m")
    assert bins == [] and out.coeffs == {"y": 1.0}


def test_max_equal_constants_keep_one():
    p = MipProblem()
    out, bins = encode_pwl(p, "max", [LinExpr({}, 1.0), LinExpr({}, 1.0)], [Interval(1, 1), Interval(1, 1)], "m")
    assert bins == [] and out.const == 1.0


@pytest.mark.parametrize("kind", ["relu", "max", "min"])
def test_pwl_exact_at_fixed_operands(kind):
    rng = np.random.default_rng(13)
    fn = {"relu": lambda v: max(v[0], 0.0), "max": max, "min": min}[kind]
    for _ in range(40):
        k = 1 if kind == "relu" else int(rng.integers(2, 5))
        ivs = []
        for _ in range(k):
            lo = rng.uniform(-2, 1)
            ivs.append(Interval(lo, lo + rng.uniform(0, 2)))
        vals = [rng.choice([iv.lo, iv.hi, rng.uniform(iv.lo, iv.hi)]) for iv in ivs]
        for sense in ("min", "max"):
            p = MipProblem()
            ops = [p.add_var(f"x{i}", v, v) for i, v in enumerate(vals)]
            y, _ = encode_pwl(p, kind, ops, ivs, "o")
            p.set_objective(y, sense)
            res = optimize(p)
            assert res.primal == pytest.approx(fn(vals), abs=1e-9)


def test_pwl_unbounded_operand():
    p = MipProblem()
    with pytest.raises(MipError):
        encode_pwl(p, "relu", [LinExpr({}, 0.0)], [Interval(-np.inf, 1)], "r")


def _random_bound(rng, n):
    xs = np.sort(rng.uniform(-2, 2, n + 1))
    while np.any(np.diff(xs) < 1e-3):
        xs = np.sort(rng.uniform(-2, 2, n + 1))
    return PwlBound(tuple(xs), tuple(rng.normal(size=n + 1)), "upper")


def test_bound_relation_matches_function():
    rng = np.random.default_rng(14)
    for trial in range(30):
        b = _random_bound(rng, int(rng.integers(1, 5)))
        for x0 in rng.uniform(b.xs[0], b.xs[-1], 3):
            for rel, sense in (("<=", "max"), (">=", "min"), ("==", "max")):
                p = MipProblem()
                x = p.add_var("x", x0, x0)
                y = p.add_var("y", -10, 10)
                encode_bound_relation(p, b, x, y, rel, "g")
                p.set_objective(y, sense)
                assert optimize(p).primal == pytest.approx(float(b(x0)), abs=1e-8)


def test_bound_relation_concave_needs_no_binaries():
    upper, lower = overapprox_unary("sin", (1.0, 1.2))
    assert upper.is_concave() and lower.is_concave()
    p = MipProblem()
    x = p.add_var("x", 1.0, 1.2)
    y = p.add_var("y", -2, 2)
    assert encode_bound_relation(p, upper, x, y, "<=", "u") == []
    bins = encode_bound_relation(p, lower, x, y, ">=", "l")
    assert len(bins) == (lower.n_segments if lower.n_segments > 1 else 0)


def test_bound_relation_agrees_with_closed_form_route():
    # dedicated encoding vs. encoding the min/max closed form generically
    rng = np.random.default_rng(15)
    for _ in range(10):
        b = _random_bound(rng, int(rng.integers(2, 5)))
        closed = to_closed_form(b, Var("x"))
        for x0 in rng.uniform(b.xs[0], b.xs[-1], 3):
            p = MipProblem()
            x = p.add_var("x", x0, x0)
            g = encode_expr(p, closed, {"x": x}, {"x": Interval(x0, x0)}, _counter())
            p.set_objective(g, "max")
            q = MipProblem()
            xq = q.add_var("x", x0, x0)
            yq = q.add_var("y", -10, 10)
            encode_bound_relation(q, b, xq, yq, "==", "g")
            q.set_objective(yq, "max")
            assert optimize(p).primal == pytest.approx(optimize(q).primal, abs=1e-8)


def _counter():
    k = [0]

    def names(tag="a"):
        k[0] += 1
        return f"{tag}{k[0]}"

    return names


# ---------------------------------------------------------------------------
# networks


def test_abs_net_fixed_input():
    p = MipProblem()
    x = p.add_var("x", -2, -2)
    (y,) = encode_network(p, ABS, [x], [(-2, 3)])
    p.set_objective(y, "max")
    hi = optimize(p).primal
    p.set_objective(y, "min")
    lo = optimize(p).primal
    assert hi == pytest.approx(2.0, abs=1e-9) and lo == pytest.approx(2.0, abs=1e-9)


def test_identity_net_no_binaries():
    p = MipProblem()
    x = p.add_var("x", -1, 1)
    (y,) = encode_network(p, IDENTITY, [x], [(-1, 1)])
    assert p.n_binaries == 0 and y.coeffs == {"x": 1.0}


def test_network_matches_forward_on_fixed_inputs():
    rng = np.random.default_rng(16)
    net = net_from(random_relu_layers(rng, 2, [8]))
    box = [(-2, 2), (-2, 2)]
    for x0 in rng.uniform(-2, 2, size=(50, 2)):
        p = MipProblem()
        xs = [p.add_var(f"x{i}", v, v) for i, v in enumerate(x0)]
        (y,) = encode_network(p, net, xs, box)
        p.set_objective(y, "max")
        assert optimize(p).primal == pytest.approx(forward(net, x0)[0], abs=1e-9)


def test_max_abs_net():
    p = MipProblem()
    x = p.add_var("x", -2, 3)
    (y,) = encode_network(p, ABS, [x], [(-2, 3)])
    p.set_objective(y, "max")
    res = optimize(p)
    assert res.primal == pytest.approx(3.0, abs=1e-9) and res.bound >= res.primal


def test_encoding_exact_against_pattern_enumeration():
    rng = np.random.default_rng(17)
    shapes = [(2, [6, 6]), (2, [12]), (3, [4, 4, 4]), (2, [5, 5]), (1, [6, 6])]
    for trial in range(20):
        n_in, hidden = shapes[trial % len(shapes)]
        layers = random_relu_layers(rng, n_in, hidden)
        net = net_from(layers)
        lo = rng.uniform(-1.5, 0.5, n_in)
        box = [(l, l + rng.uniform(0.2, 1.5)) for l in lo]
        want = pattern_extremes(layers, box)
        for sense, target in (("min", want[0]), ("max", want[1])):
            p = MipProblem()
            xs = [p.add_var(f"x{i}", *iv) for i, iv in enumerate(box)]
            (y,) = encode_network(p, net, xs, box)
            p.set_objective(y, sense)
            res = ReferenceSolver().optimize(p)
            assert res.status == "optimal"
            assert res.primal == pytest.approx(target, abs=1e-6)
            if sense == "max":
                assert res.bound >= res.primal
            else:
                assert res.bound <= res.primal
            assert p.violations(res.witness) == []


def test_highs_adapter_agrees():
    rng = np.random.default_rng(18)
    for _ in range(5):
        net = net_from(random_relu_layers(rng, 2, [6, 6]))
        box = [(-1, 1), (-1, 1)]
        vals = []
        for solver in (ReferenceSolver(), HighsSolver()):
            p = MipProblem()
            xs = [p.add_var(f"x{i}", *iv) for i, iv in enumerate(box)]
            (y,) = encode_network(p, net, xs, box)
            p.set_objective(y, "max")
            res = solver.optimize(p)
            assert res.bound >= res.primal - 1e-9
            vals.append(res.primal)
        assert vals[0] == pytest.approx(vals[1], abs=1e-6)


def test_deterministic():
    rng = np.random.default_rng(19)
    net = net_from(random_relu_layers(rng, 2, [8, 8]))
    box = [(-1, 1), (-1, 1)]
    outs = []
    for _ in range(2):
        p = MipProblem()
        xs = [p.add_var(f"x{i}", *iv) for i, iv in enumerate(box)]
        (y,) = encode_network(p, net, xs, box)
        p.set_objective(y, "min")
        r = optimize(p, "reference")
        outs.append((r.status, r.primal, r.bound, r.nodes, tuple(sorted(r.witness.items()))))
    assert outs[0] == outs[1]


# ---------------------------------------------------------------------------
# optimize / check_feasible


def test_min_box():
    p = MipProblem()
    x = p.add_var("x", 2, 5)
    p.set_objective(x, "min")
    res = optimize(p)
    assert res.primal == 2.0 and res.bound <= 2.0


def test_feasibility_examples():
    p = MipProblem()
    x = p.add_var("x", 0, 1)
    p.add_constr(x, ">=", 2)
    assert check_feasible(p).status == "infeasible"
    p = MipProblem()
    x = p.add_var("x", 0, 1)
    p.add_constr(x, ">=", 0.5)
    res = check_feasible(p)
    assert res.status == "feasible" and res.witness["x"] >= 0.5
    assert p.violations(res.witness) == []


def test_node_limit_gives_sound_bound():
    rng = np.random.default_rng(20)
    net = net_from(random_relu_layers(rng, 2, [10, 10]))
    box = [(-2, 2), (-2, 2)]
    p = MipProblem()
    xs = [p.add_var(f"x{i}", *iv) for i, iv in enumerate(box)]
    (y,) = encode_network(p, net, xs, box)
    p.set_objective(y, "max")
    full = ReferenceSolver().optimize(p)
    cut = ReferenceSolver(node_limit=3).optimize(p)
    assert cut.status == "bound-only"
    assert cut.bound >= full.primal - 1e-9


def test_feasibility_resource_limit_is_error():
    rng = np.random.default_rng(21)
    net = net_from(random_relu_layers(rng, 2, [10, 10]))
    box = [(-2, 2), (-2, 2)]
    p = MipProblem()
    xs = [p.add_var(f"x{i}", *iv) for i, iv in enumerate(box)]
    (y,) = encode_network(p, net, xs, box)
    full = ReferenceSolver().optimize(_with_objective(p, y, "max"))
    p.add_constr(y, ">=", full.primal + 1e-3)
    res = ReferenceSolver(node_limit=2).check_feasible(p)
    assert res.status in ("error", "infeasible")
    assert ReferenceSolver().check_feasible(p).status == "infeasible"


def _with_objective(p, y, sense):
    q = p.copy()
    q.set_objective(y, sense)
    return q


def test_get_solver_env(monkeypatch):
    monkeypatch.setenv("OVERT_SOLVER", "highs")
    assert get_solver().name == "highs"
    monkeypatch.delenv("OVERT_SOLVER")
    assert get_solver().name == "reference"
    with pytest.raises(ValueError):
        get_solver("gurobi")


# ---------------------------------------------------------------------------
# closed-loop queries


def test_horizon_zero_box_face():
    q = build_query([], None, [(1, 1.2), (0, 0.2)], objective=("max", "x1"), states=["x1", "x2"])
    res = optimize(q.problem)
    assert res.primal == pytest.approx(1.2, abs=1e-12)


def test_one_step_pendulum_lower_bounded_by_simulation():
    oa = overapproximate_dynamics(PEND, [(1, 1), (0.1, 0.1)], [(0, 0)])
    q = build_query([oa], ZERO_CTRL, [(1, 1), (0.1, 0.1)], objective=("max", 0))
    res = optimize(q.problem)
    assert res.status == "optimal"
    assert res.primal >= 1.01 - 1e-12 and res.bound >= 1.01 - 1e-12
    # x2 is bracketed around the true successor as well
    true = PEND.step([1.0, 0.1], [0.0])
    for sense in ("max", "min"):
        q = build_query([oa], ZERO_CTRL, [(1, 1), (0.1, 0.1)], objective=(sense, 1))
        r = optimize(q.problem)
        assert (r.bound >= true[1]) if sense == "max" else (r.bound <= true[1])


def test_feasibility_disjoint_half_space():
    box = [(1, 1.2), (0, 0.2)]
    oa = overapproximate_dynamics(PEND, box, [(-0.1, 0.1)])
    env = oa.envelope({"x1": 1.1, "x2": 0.1, "u": 0.0})
    assert 0.9 <= env[oa.outputs[0]].lo
    q = build_query([oa], None, box, negated=[({"x1": 1.0}, "<=", -0.2167)])
    assert check_feasible(q.problem).status == "infeasible"
    q = build_query([oa], None, box, negated=[({0: 1.0}, ">=", 1.5)])
    assert check_feasible(q.problem).status == "infeasible"


def test_feasibility_witness_reachable_half_space():
    box = [(1, 1.2), (0, 0.2)]
    oa = overapproximate_dynamics(PEND, box, [(-0.1, 0.1)])
    q = build_query([oa], None, box, negated=[({"x1": 1.0}, ">=", 1.2)])
    res = check_feasible(q.problem)
    assert res.status == "feasible"
    assert res.witness[q.states[1][0]] >= 1.2 - 1e-9
    assert q.problem.violations(res.witness) == []


def test_inconsistent_chain_domains():
    a = overapproximate_dynamics(PEND, [(1, 1.2), (0, 0.2)], [(0, 0)])
    b = overapproximate_dynamics(PEND, [(5, 6), (0, 0.2)], [(0, 0)])
    with pytest.raises(MipError):
        build_query([a, b], ZERO_CTRL, [(1, 1.2), (0, 0.2)], objective=("max", 0))


def test_two_step_chain_contains_simulation():
    rng = np.random.default_rng(22)
    box = [(1, 1.2), (0, 0.2)]
    ctrl = Network((Layer([[-1.0, -0.5]], [0.3], "linear"),))
    a = overapproximate_dynamics(PEND, box, [(-1.6, -0.6)])
    xs = np.column_stack([rng.uniform(1, 1.2, 2000), rng.uniform(0, 0.2, 2000)])
    nxt = np.array([PEND.step(x, forward(ctrl, x)) for x in xs])
    box1 = [(nxt[:, 0].min() - 0.05, nxt[:, 0].max() + 0.05), (nxt[:, 1].min() - 0.2, nxt[:, 1].max() + 0.2)]
    b = overapproximate_dynamics(PEND, box1, [(-1.8, -0.4)])
    final = np.array([PEND.step(x, forward(ctrl, x)) for x in nxt])
    for k in range(2):
        hi = optimize(build_query([a, b], ctrl, box, objective=("max", k)).problem).bound
        lo = optimize(build_query([a, b], ctrl, box, objective=("min", k)).problem).bound
        assert lo <= final[:, k].min() and final[:, k].max() <= hi
