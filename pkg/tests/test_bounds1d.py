from __future__ import annotations

import math

import numpy as np
import pytest

from overt.bounds1d import (
    ApproxParams,
    PwlBound,
    basis_function,
    get_function,
    optimize_secant_breakpoints,
    optimize_tangent_breakpoints,
    overapprox_unary,
    regions,
    repair_continuity,
    secant_residuals,
    tangent_residuals,
    to_closed_form,
)
from overt.expr import Binary, Const, Interval, Nary, Unary, Var, evaluate, linear_form

HALF_PI = math.pi / 2
OPS = [("sin", None), ("cos", None), ("exp", None), ("log", None), ("tanh", None),
       ("pow", 2.0), ("pow", 3.0), ("pow", 0.5), ("recip", 1.5), ("cpow", 2.0)]


def random_interval(tag, param, rng):
    if tag in ("log", "recip") or (tag == "pow" and param == 0.5):
        lo = rng.uniform(0.05, 3.0)
        return lo, lo + rng.uniform(0.01, 4.0)
    if tag == "exp":
        lo = rng.uniform(-4.0, 2.0)
        return lo, lo + rng.uniform(0.01, 3.0)
    lo = rng.uniform(-4.0, 3.0)
    return lo, lo + rng.uniform(0.01, 5.0)


def area(upper, lower, lo, hi):
    x = np.linspace(lo, hi, 20001)
    return float(np.trapezoid(upper(x) - lower(x), x))


class TestSecant:
    def test_single_secant(self):
        f = get_function("pow", 2.0)
        b = optimize_secant_breakpoints(f.f, f.df, (0, 2), 1)
        assert b.xs == (0.0, 2.0) and b.ys == (0.0, 4.0)

    def test_square_two_segments(self):
        f = get_function("pow", 2.0)
        b = optimize_secant_breakpoints(f.f, f.df, (-1, 2), 2)
        assert b.xs[1] == pytest.approx(0.5, abs=1e-10)

    def test_tanh_convex_region(self):
        f = get_function("tanh")
        b = optimize_secant_breakpoints(f.f, f.df, (-HALF_PI, 0), 2)
        assert b.xs[1] == pytest.approx(-0.7668186154783817, abs=1e-6)
        assert b.ys[0] == pytest.approx(math.tanh(-HALF_PI)) and b.ys[-1] == 0.0

    def test_endpoints_on_function(self):
        f = get_function("exp")
        b = optimize_secant_breakpoints(f.f, f.df, (-1, 2), 5)
        assert b.ys[0] == math.exp(-1) and b.ys[-1] == math.exp(2)
        np.testing.assert_array_equal(b.ys, np.exp(b.xs))


class TestTangent:
    def test_tanh_concave_region(self):
        f = get_function("tanh")
        b = optimize_tangent_breakpoints(f.f, f.df, (0, HALF_PI), 2)
        assert b.xs[1] == pytest.approx(0.7937295874538862, abs=1e-6)
        assert b.ys[1] == pytest.approx(0.7937295874441845, abs=1e-6)
        assert b.ys[0] == 0.0 and b.ys[-1] == pytest.approx(math.tanh(HALF_PI))

    @pytest.mark.parametrize("n", [1, 2, 3, 6])
    def test_linear_function(self, n):
        f, df = (lambda x: 2.5 * np.asarray(x)), (lambda x: 2.5 + 0 * np.asarray(x))
        b = optimize_tangent_breakpoints(f, df, (-1, 3), n)
        np.testing.assert_allclose(b.ys, 2.5 * np.asarray(b.xs), atol=1e-12)

    def test_cos_three_segments_sound(self):
        f = get_function("cos")
        b = optimize_tangent_breakpoints(f.f, f.df, (-math.pi / 3, HALF_PI), 3)
        x = np.linspace(-math.pi / 3, HALF_PI, 10_000)
        assert np.all(b(x) >= np.cos(x) - 1e-15)
        assert np.max(np.abs(tangent_residuals(f.f, f.df, b.xs))) < 1e-6

    def test_single_midpoint_tangent(self):
        f = get_function("sin")
        b = optimize_tangent_breakpoints(f.f, f.df, (1, 1.2), 1)
        s, t = math.cos(1.1), 1.1
        assert b.ys[0] == pytest.approx(math.sin(t) + s * (1 - t), abs=1e-15)
        assert b.ys[1] == pytest.approx(math.sin(t) + s * (1.2 - t), abs=1e-15)


class TestRepair:
    def test_takes_max(self):
        draft = PwlBound((0.0, 1.0, 2.0), (0.0, 0.0, 0.0), "upper")
        # lines hit x=1 at 2.0 and 2.1
        out = repair_continuity(draft, [(2.0, 0.0), (0.1, 2.0)])
        assert out.ys[1] == 2.1

    def test_takes_min_for_lower(self):
        draft = PwlBound((0.0, 1.0, 2.0), (0.0, 0.0, 0.0), "lower")
        out = repair_continuity(draft, [(2.0, 0.0), (0.1, 2.0)])
        assert out.ys[1] == 2.0

    def test_fixed_point(self):
        b = PwlBound((0.0, 1.0, 3.0), (1.0, 2.0, 0.0), "upper")
        assert repair_continuity(b, b.lines()) == b

    def test_perturbed_tanh_still_sound(self):
        f = get_function("tanh")
        good = optimize_tangent_breakpoints(f.f, f.df, (0, HALF_PI), 3)
        xs = list(good.xs)
        xs[1] += 0.1
        ts = [0.0, 0.5 * (xs[1] + xs[2]), HALF_PI]
        pieces = [(float(f.df(t)), float(f.f(t) - f.df(t) * t)) for t in ts]
        out = repair_continuity(PwlBound(tuple(xs), (0.0,) * 4, "upper"), pieces)
        x = np.linspace(0, HALF_PI, 10_000)
        assert np.all(out(x) >= np.tanh(x) - 1e-15)


class TestOverapproxUnary:
    def test_sin_concave_region(self):
        up, lo = overapprox_unary("sin", (1, 1.2), ApproxParams(n=1, eps=0.0))
        assert up.ys[0] == pytest.approx(math.sin(1.1) - 0.1 * math.cos(1.1), abs=1e-14)
        assert lo.ys == (math.sin(1.0), math.sin(1.2))
        x = np.linspace(1, 1.2, 10_000)
        assert np.all(lo(x) <= np.sin(x) + 1e-15) and np.all(np.sin(x) <= up(x) + 1e-15)

    def test_tanh_golden(self):
        up, lo = overapprox_unary("tanh", (-HALF_PI, HALF_PI), ApproxParams(n=2, eps=0.0))
        np.testing.assert_allclose(
            up.xs, [-HALF_PI, -0.7668186154783817, 0.0, 0.7937295874538862, HALF_PI], atol=1e-6
        )
        np.testing.assert_allclose(
            up.ys,
            [-0.9171523356672744, -0.6450757227359059, 0.0, 0.7937295874441845, 0.9171523356672744],
            atol=1e-6,
        )
        np.testing.assert_allclose(lo.xs, [-x for x in reversed(up.xs)], atol=1e-12)
        np.testing.assert_allclose(lo.ys, [-y for y in reversed(up.ys)], atol=1e-12)

    def test_eps_shift(self):
        up0, lo0 = overapprox_unary("exp", (0, 1), ApproxParams(n=3, eps=0.0))
        up, lo = overapprox_unary("exp", (0, 1), ApproxParams(n=3, eps=1e-3))
        np.testing.assert_allclose(np.subtract(up.ys, up0.ys), 1e-3, atol=1e-15)
        np.testing.assert_allclose(np.subtract(lo0.ys, lo.ys), 1e-3, atol=1e-15)

    def test_region_endpoints_on_function(self):
        fn = get_function("sin")
        up, lo = overapprox_unary("sin", (-2, 5), ApproxParams(n=3, eps=0.0))
        for cut in (0.0, math.pi):
            for b in (up, lo):
                i = int(np.argmin(np.abs(np.asarray(b.xs) - cut)))
                assert b.xs[i] == pytest.approx(cut, abs=1e-15)
                assert b.ys[i] == pytest.approx(float(fn.f(cut)), abs=1e-12)

    def test_error_target(self):
        for tag, param, d in [("log", None, (0.01, 1.01)), ("sin", None, (-3, 3)), ("exp", None, (-9, 0.1))]:
            up, lo = overapprox_unary(tag, d, ApproxParams(rel_error=0.02, eps=0.0), param=param)
            fn = get_function(tag, param)
            x = np.linspace(*d, 2048)
            scale = np.max(np.abs(fn.f(x)))
            assert np.max(up(x) - fn.f(x)) <= 0.02 * scale * 1.001
            assert np.max(fn.f(x) - lo(x)) <= 0.02 * scale * 1.001

    def test_domain_errors(self):
        from overt.expr import DomainError

        with pytest.raises(DomainError):
            overapprox_unary("log", (-1, 1))
        with pytest.raises(DomainError):
            overapprox_unary("recip", (-1, 1), param=1.0)

    def test_zero_width_domain(self):
        up, lo = overapprox_unary("sin", (0.5, 0.5))
        assert lo(0.5) < math.sin(0.5) < up(0.5)


class TestParams:
    def test_defaults_to_error_target(self):
        p = ApproxParams()
        assert p.n is None and p.rel_error == 0.02 and p.eps == 1e-4 and p.xi == 1e-2

    def test_exclusive(self):
        with pytest.raises(ValueError):
            ApproxParams(n=2, rel_error=0.1)
        with pytest.raises(ValueError):
            ApproxParams(n=0)
        with pytest.raises(ValueError):
            ApproxParams(eps=-1)
        with pytest.raises(ValueError):
            ApproxParams(xi=0)


class TestClosedForm:
    def _nodes(self, e):
        yield e
        for c in getattr(e, "args", ()) or ():
            yield from self._nodes(c)
        for attr in ("left", "right", "arg"):
            if hasattr(e, attr):
                yield from self._nodes(getattr(e, attr))

    def test_kronecker(self):
        xs = (-1.3, -0.2, 0.7, 2.9, 4.0)
        for i in range(len(xs)):
            beta = basis_function(xs, i)
            for j, xj in enumerate(xs):
                assert evaluate(beta, {"x": xj}) == (1.0 if i == j else 0.0)

    @pytest.mark.parametrize("tag,param,d", [("tanh", None, (-HALF_PI, HALF_PI)), ("log", None, (0.01, 1.01)), ("sin", None, (-3, 4))])
    def test_interpolates(self, tag, param, d):
        up, lo = overapprox_unary(tag, d, param=param)
        for b in (up, lo):
            g = to_closed_form(b)
            for xj, yj in zip(b.xs, b.ys):
                assert evaluate(g, {"x": xj}) == yj
            x = np.linspace(*d, 1000)
            np.testing.assert_allclose(evaluate(g, {"x": x}), b(x), rtol=0, atol=1e-9)

    def test_only_pwl_nodes(self):
        up, _ = overapprox_unary("tanh", (-HALF_PI, HALF_PI), ApproxParams(n=2, eps=0.0))
        g = to_closed_form(up)
        for node in self._nodes(g):
            assert not isinstance(node, Unary)
            if isinstance(node, Binary):
                assert node.op in ("+", "-", "*", "/")
                if node.op == "*":
                    assert isinstance(node.left, Const)
                if node.op == "/":
                    assert isinstance(node.right, Const)

    def test_tanh_structure(self):
        up, _ = overapprox_unary("tanh", (-HALF_PI, HALF_PI), ApproxParams(n=2, eps=0.0))
        g = to_closed_form(up)
        terms = []
        node = g
        while isinstance(node, Binary) and node.op == "+":
            terms.append(node.right)
            node = node.left
        terms.append(node)
        terms.reverse()
        assert len(terms) == 5
        for k, t in enumerate(terms):
            assert isinstance(t.left, Const) and t.left.value == up.ys[k]
            beta = t.right
            assert isinstance(beta, Nary) and beta.op == "max"
            inner = beta.args[1]
            if 0 < k < 4:
                assert isinstance(inner, Nary) and inner.op == "min"
        # slopes of the ramp pieces agree with the golden coefficients
        ramps = [terms[1].right.args[1].args[0], terms[1].right.args[1].args[1],
                 terms[3].right.args[1].args[0], terms[3].right.args[1].args[1]]
        slopes = [linear_form(r)[0]["x"] for r in ramps]
        np.testing.assert_allclose(
            np.abs(slopes), [1.24381557588518, 1.304089363266367, 1.2598749193762386, 1.2868907512989782], rtol=1e-6
        )

    def test_two_breakpoints_affine(self):
        b = PwlBound((1.0, 3.0), (2.0, 6.0), "upper")
        g = to_closed_form(b)
        x = np.linspace(1, 3, 101)
        np.testing.assert_allclose(evaluate(g, {"x": x}), 2 * x, atol=1e-14)

    def test_custom_argument(self):
        b = PwlBound((0.0, 1.0, 2.0), (0.0, 1.0, 0.0))
        g = to_closed_form(b, Var("v3"))
        assert evaluate(g, {"v3": 0.5}) == 0.5


class TestProperties:
    @pytest.mark.parametrize("tag,param", OPS)
    def test_soundness(self, tag, param):
        rng = np.random.default_rng(abs(hash((tag, param))) % 2**32)
        fn = get_function(tag, param)
        for _ in range(50):
            lo, hi = random_interval(tag, param, rng)
            up, low = overapprox_unary(tag, (lo, hi), ApproxParams(rel_error=0.02), param=param)
            x = np.linspace(lo, hi, 10_000)
            fx = fn.f(x)
            assert np.all(low(x) < fx) and np.all(fx < up(x))

    @pytest.mark.parametrize("tag,param", OPS)
    def test_optimality_residuals(self, tag, param):
        rng = np.random.default_rng(7)
        fn = get_function(tag, param)
        neg_f, neg_df = (lambda x: -fn.f(x)), (lambda x: -fn.df(x))
        for _ in range(50):
            lo, hi = random_interval(tag, param, rng)
            n = int(rng.integers(2, 9))
            for a, b in regions(fn, Interval(lo, hi)):
                mid = 0.5 * (a + b)
                convex = fn.d2f(mid) > 0
                f, df = (fn.f, fn.df) if convex else (neg_f, neg_df)
                sec = optimize_secant_breakpoints(f, df, (a, b), n)
                assert np.max(np.abs(secant_residuals(f, df, sec.xs)), initial=0.0) < 1e-6
                g, dg = (neg_f, neg_df) if convex else (fn.f, fn.df)
                tan = optimize_tangent_breakpoints(g, dg, (a, b), n)
                assert np.max(np.abs(tangent_residuals(g, dg, tan.xs)), initial=0.0) < 1e-6

    def test_midpoint_tangent_optimal(self):
        rng = np.random.default_rng(3)
        concave = [("sin", None, 0.1, 3.0), ("log", None, 0.1, 5.0), ("tanh", None, 0.0, 3.0), ("pow", 0.5, 0.1, 4.0)]
        count = 0
        while count < 20:
            tag, param, lo0, hi0 = concave[count % len(concave)]
            a = rng.uniform(lo0, hi0 - 0.05)
            b = rng.uniform(a + 0.02, hi0)
            fn = get_function(tag, param)
            x = np.linspace(a, b, 4001)
            fint = np.trapezoid(fn.f(x), x)

            def tangent_area(t):
                return (b - a) * (fn.f(t) + fn.df(t) * (0.5 * (a + b) - t)) - fint

            best = optimize_tangent_breakpoints(fn.f, fn.df, (a, b), 1)
            best_area = 0.5 * (best.ys[0] + best.ys[1]) * (b - a) - fint
            assert best_area == pytest.approx(tangent_area(0.5 * (a + b)), rel=1e-9, abs=1e-15)
            for t in rng.uniform(a, b, 50):
                assert best_area < tangent_area(t)
            count += 1

    @pytest.mark.parametrize("tag,param", OPS)
    def test_refinement_from_two_segments(self, tag, param):
        rng = np.random.default_rng(11)
        for _ in range(25):
            lo, hi = random_interval(tag, param, rng)
            areas = []
            for n in (2, 4, 8):
                up, low = overapprox_unary(tag, (lo, hi), ApproxParams(n=n, eps=0.0), param=param)
                areas.append(area(up, low, lo, hi))
            assert areas[1] <= areas[0] * (1 + 1e-9) + 1e-15
            assert areas[2] <= areas[1] * (1 + 1e-9) + 1e-15

    def test_refinement_one_to_two_can_loosen(self):
        # one midpoint tangent beats two tangents pinned at steep endpoints
        lo, hi = -1.4991685754438728, 1.12275622629095
        a = []
        for n in (1, 2):
            up, low = overapprox_unary("pow", (lo, hi), ApproxParams(n=n, eps=0.0), param=4.0)
            a.append(area(up, low, lo, hi))
        assert a[1] > a[0]

    def test_refinement_one_to_two_typical(self):
        rng = np.random.default_rng(5)
        for tag, param in [("sin", None), ("exp", None), ("log", None), ("tanh", None)]:
            lo, hi = random_interval(tag, param, rng)
            a = []
            for n in (1, 2):
                up, low = overapprox_unary(tag, (lo, hi), ApproxParams(n=n, eps=0.0), param=param)
                a.append(area(up, low, lo, hi))
            assert a[1] <= a[0] * (1 + 1e-9)

    def test_continuity_shared_values(self):
        up, lo = overapprox_unary("cos", (-4, 4), ApproxParams(n=3))
        g = to_closed_form(up)
        for xj, yj in zip(up.xs, up.ys):
            left = evaluate(g, {"x": xj - 1e-12})
            right = evaluate(g, {"x": xj + 1e-12})
            assert abs(left - yj) < 1e-9 and abs(right - yj) < 1e-9
