from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from overt.expr import (
    Binary,
    Const,
    DomainError,
    ExprError,
    Interval,
    Nary,
    NonDifferentiableError,
    ParseError,
    Unary,
    Var,
    convert_mul_div,
    differentiate,
    evaluate,
    find_inflections,
    free_vars,
    has_mul_div,
    interval_eval,
    linear_form,
    parse,
    to_string,
    unary_view,
)


class TestParse:
    def test_sum(self):
        assert parse("x + y") == Binary("+", Var("x"), Var("y"))

    def test_nested_example(self):
        e = parse("sin(x^2 + y - log(z))")
        inner = Binary("-", Binary("+", Binary("^", Var("x"), Const(2.0)), Var("y")), Unary("log", Var("z")))
        assert e == Unary("sin", inner)

    def test_relu_negative(self):
        assert evaluate(parse("relu(-3)"), {}) == 0.0

    def test_precedence(self):
        assert evaluate(parse("2 + 3 * 4 ^ 2"), {}) == 50.0
        assert evaluate(parse("-2^2"), {}) == -4.0
        assert evaluate(parse("2^-1"), {}) == 0.5
        assert evaluate(parse("8 / 4 / 2"), {}) == 1.0

    def test_error_positions(self):
        with pytest.raises(ParseError) as exc:
            parse("x + * y")
        assert exc.value.position == 4
        with pytest.raises(ParseError, match="unknown function"):
            parse("foo(x)")
        with pytest.raises(ParseError, match="expects"):
            parse("sin(x, y)")
        with pytest.raises(ParseError):
            parse("x^y")
        with pytest.raises(ParseError):
            parse("(x + 1")

    def test_sqrt_and_pi(self):
        assert parse("sqrt(x)") == Binary("^", Var("x"), Const(0.5))
        assert evaluate(parse("sin(pi/2)"), {}) == pytest.approx(1.0)

    def test_min_max(self):
        e = parse("max(x, 0, min(y, 1))")
        assert isinstance(e, Nary) and len(e.args) == 3
        assert evaluate(e, {"x": -1.0, "y": 0.5}) == 0.5


def _trees():
    leaves = st.one_of(
        st.sampled_from(["x", "y", "z"]).map(Var),
        st.floats(min_value=-50, max_value=50, allow_nan=False).map(Const),
    )
    consts = st.floats(min_value=-4, max_value=4, allow_nan=False).map(Const)

    def extend(sub):
        return st.one_of(
            st.tuples(st.sampled_from(["neg", "sin", "cos", "exp", "log", "tanh", "relu", "abs"]), sub).map(
                lambda t: Unary(*t)
            ),
            st.tuples(st.sampled_from(["+", "-", "*", "/"]), sub, sub).map(lambda t: Binary(*t)),
            st.tuples(sub, consts).map(lambda t: Binary("^", *t)),
            st.tuples(st.sampled_from(["min", "max"]), st.lists(sub, min_size=2, max_size=3)).map(
                lambda t: Nary(t[0], tuple(t[1]))
            ),
        )

    return st.recursive(leaves, extend, max_leaves=12)


@settings(max_examples=1000, deadline=None)
@given(_trees())
def test_print_parse_roundtrip(e):
    assert parse(to_string(e)) == e


class TestEvaluate:
    def test_examples(self):
        assert evaluate(parse("sin(x)"), {"x": 0.0}) == 0.0
        assert evaluate(parse("x^2"), {"x": 0.5}) == 0.25

    def test_tanh_value(self):
        x = 0.7937295874538862
        e2 = math.exp(2 * x)
        expected = (e2 - 1) / (e2 + 1)
        got = evaluate(parse("tanh(x)"), {"x": x})
        assert got == pytest.approx(0.6605166528544473, abs=1e-15)
        assert got == pytest.approx(expected, abs=1e-15)

    def test_unbound(self):
        with pytest.raises(ExprError):
            evaluate(parse("x + y"), {"x": 1.0})

    def test_domain_errors(self):
        with pytest.raises(DomainError):
            evaluate(parse("log(x)"), {"x": 0.0})
        with pytest.raises(DomainError):
            evaluate(parse("1 / x"), {"x": 0.0})

    def test_vectorized(self):
        xs = np.linspace(-1, 1, 5)
        np.testing.assert_allclose(evaluate(parse("x^2 + 1"), {"x": xs}), xs**2 + 1)


SMOOTH_CASES = [
    ("sin(x)", (-3, 3)),
    ("cos(x)", (-3, 3)),
    ("exp(x)", (-2, 2)),
    ("log(x)", (0.2, 4)),
    ("tanh(x)", (-3, 3)),
    ("x^3", (-2, 2)),
    ("x^0.5", (0.2, 4)),
    ("2/x", (0.3, 3)),
    ("2^x", (-2, 2)),
    ("sin(x^2 + 1) * exp(-x)", (-1.5, 1.5)),
    ("log(x) / (x + 2)", (0.3, 3)),
]


class TestDifferentiate:
    def test_examples(self):
        assert differentiate(parse("sin(x)"), "x") == Unary("cos", Var("x"))
        assert evaluate(differentiate(parse("x^2"), "x"), {"x": 1.5}) == pytest.approx(3.0)
        assert evaluate(differentiate(parse("tanh(x)"), "x"), {"x": 0.0}) == pytest.approx(1.0)

    @pytest.mark.parametrize("text,dom", SMOOTH_CASES)
    def test_matches_central_difference(self, text, dom):
        rng = np.random.default_rng(42)
        e = parse(text)
        de = differentiate(e, "x")
        lo, hi = dom
        h = 1e-5
        for x in rng.uniform(lo + 0.01, hi - 0.01, 100):
            fd = (evaluate(e, {"x": x + h}) - evaluate(e, {"x": x - h})) / (2 * h)
            exact = evaluate(de, {"x": x})
            assert abs(exact - fd) <= 1e-6 * max(1.0, abs(exact))

    def test_other_variable_is_constant(self):
        assert evaluate(differentiate(parse("x*y + sin(y)"), "x"), {"x": 2.0, "y": 3.0}) == 3.0

    def test_non_differentiable(self):
        for text in ("relu(x)", "max(x, 1)", "abs(x)"):
            with pytest.raises(NonDifferentiableError):
                differentiate(parse(text), "x")


class TestInflections:
    def test_examples(self):
        assert find_inflections("tanh", (-math.pi / 2, math.pi / 2)) == [0.0]
        assert find_inflections("exp", (-3, 3)) == []
        pts = find_inflections("sin", (-1, 4))
        assert len(pts) == 2
        assert pts[0] == pytest.approx(0.0, abs=1e-15)
        assert pts[1] == pytest.approx(math.pi)

    def test_unsupported(self):
        with pytest.raises(ExprError):
            find_inflections("relu", (-1, 1))

    @pytest.mark.parametrize(
        "tag,param,text,dom",
        [
            ("sin", None, "sin(x)", (-7, 9)),
            ("cos", None, "cos(x)", (-7, 9)),
            ("tanh", None, "tanh(x)", (-3, 2)),
            ("exp", None, "exp(x)", (-3, 3)),
            ("log", None, "log(x)", (0.1, 5)),
            ("pow", 3.0, "x^3", (-2, 3)),
            ("pow", 2.0, "x^2", (-2, 3)),
            ("pow", 5.0, "x^5", (-1, 1)),
            ("pow", 0.5, "x^0.5", (0.1, 3)),
            ("recip", 2.0, "2/x", (0.1, 3)),
            ("recip", 2.0, "2/x", (-3, -0.1)),
            ("cpow", 0.5, "0.5^x", (-3, 3)),
        ],
    )
    def test_constant_curvature_between_points(self, tag, param, text, dom):
        e = parse(text)
        d2 = differentiate(differentiate(e, "x"), "x")
        pts = [dom[0]] + find_inflections(tag, dom, param) + [dom[1]]
        assert all(b > a for a, b in zip(pts, pts[1:]))
        for a, b in zip(pts, pts[1:]):
            grid = np.linspace(a, b, 1000)[1:-1]
            vals = np.asarray(evaluate(d2, {"x": grid}), dtype=float)
            big = np.abs(vals) > 1e-9
            signs = np.sign(vals[big])
            assert signs.size == 0 or np.all(signs == signs[0])


class TestConvertMulDiv:
    def _check(self, text, doms, n=1000, tol=1e-9):
        e = parse(text)
        out, new_doms = convert_mul_div(e, {k: Interval(*v) for k, v in doms.items()}, 0.01)
        assert not has_mul_div(out)
        assert set(new_doms) == set(doms)
        rng = np.random.default_rng(42)
        b = {k: rng.uniform(lo, hi, n) for k, (lo, hi) in doms.items()}
        np.testing.assert_allclose(evaluate(out, b), evaluate(e, b), rtol=0, atol=tol)
        return out

    def test_product(self):
        out = self._check("x*y", {"x": (1, 2), "y": (1, 2)})
        assert "exp" in to_string(out) and "log" in to_string(out)

    def test_scalar_multiply_unchanged(self):
        e = parse("3*x")
        assert convert_mul_div(e, {"x": Interval(0, 1)})[0] == e

    def test_quotient(self):
        self._check("x/y", {"x": (1, 2), "y": (1, 2)})

    def test_mixed_sign_operands(self):
        self._check("x*y + z/y", {"x": (-3, 2), "y": (0.5, 4), "z": (-1, 1)})
        self._check("x / y", {"x": (-3, 2), "y": (-4, -0.5)})

    def test_nested(self):
        self._check("x4 * cos(x3)", {"x4": (1.5, 1.51), "x3": (2.1, 2.11)})
        self._check("(x + y) * (x - y) * z", {"x": (0, 1), "y": (2, 3), "z": (-1, 0)}, tol=1e-8)

    def test_zero_width_operand_is_constant(self):
        out = self._check("x*y", {"x": (2, 2), "y": (-1, 1)})
        assert "log" not in to_string(out)

    def test_errors(self):
        with pytest.raises(ExprError):
            convert_mul_div(parse("x / y"), {"x": Interval(0, 1), "y": Interval(-1, 1)})
        with pytest.raises(ExprError):
            convert_mul_div(parse("x * y"), {"x": Interval(0, 1), "y": Interval(0, math.inf)})


class TestHelpers:
    def test_linear_form(self):
        assert linear_form(parse("2*x - 3*(y - 1) + x/4")) == ({"x": 2.25, "y": -3.0}, 3.0)
        assert linear_form(parse("x*y")) is None

    def test_unary_view(self):
        assert unary_view(parse("x^3"))[:2] == ("pow", 3.0)
        assert unary_view(parse("2^x"))[:2] == ("cpow", 2.0)
        assert unary_view(parse("3/x"))[:2] == ("recip", 3.0)
        assert unary_view(parse("x + 1")) is None

    def test_free_vars(self):
        assert free_vars(parse("sin(x) + y*2 - pi")) == {"x", "y"}

    def test_interval_eval_sound(self):
        e = parse("sin(x) * y + x^2 - exp(y)")
        d = interval_eval(e, {"x": Interval(-1, 2), "y": Interval(0, 1)})
        rng = np.random.default_rng(42)
        vals = evaluate(e, {"x": rng.uniform(-1, 2, 5000), "y": rng.uniform(0, 1, 5000)})
        assert d.lo <= vals.min() and vals.max() <= d.hi

    def test_interval_exact_ranges(self):
        d = interval_eval(parse("sin(x)"), {"x": Interval(-1, 1)})
        assert d.lo == pytest.approx(-0.8414709848, abs=1e-9)
        assert d.hi == pytest.approx(0.8414709848, abs=1e-9)
        d = interval_eval(parse("x^2"), {"x": Interval(-1, 2)})
        assert d.lo == 0.0 and d.hi == pytest.approx(4.0)

    def test_interval_validation(self):
        with pytest.raises(ValueError):
            Interval(1, 0)
