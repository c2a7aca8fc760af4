import json
import math
import threading

import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from nadmm.expr import (Add, CompiledExpr, Const, Cos, Exp, ExprSyntaxError, Mul,
                        MissingVariableError, Neg, Point, Pow, Sin, Var, evaluate, grad, hess,
                        parse_expr, to_json, to_text, variables_of)

from exprgen import NAMES, expr_fun, fd_gradient, fd_jacobian, random_expr, random_point, rel_err


def to_sympy(e):
    if isinstance(e, Const):
        return sp.Float(e.value, 30)
    if isinstance(e, Var):
        return sp.Symbol(e.name)
    if isinstance(e, Add):
        return to_sympy(e.left) + to_sympy(e.right)
    if isinstance(e, Mul):
        return to_sympy(e.left) * to_sympy(e.right)
    if isinstance(e, Pow):
        return to_sympy(e.base) ** e.exponent
    if isinstance(e, Neg):
        return -to_sympy(e.arg)
    fn = {Sin: sp.sin, Cos: sp.cos, Exp: sp.exp}[type(e)]
    return fn(to_sympy(e.arg))


@st.composite
def exprs(draw, depth=3):
    seed = draw(st.integers(0, 2**32 - 1))
    return random_expr(np.random.default_rng(seed), depth)


class TestParse:
    def test_pow_node(self):
        assert parse_expr({"pow": [{"var": "x"}, 2]}) == Pow(Var("x"), 2)

    def test_constraint_from_tree(self):
        e = parse_expr({"add": [{"pow": [{"var": "x"}, 2]}, {"const": -1}]})
        assert e == Add(Pow(Var("x"), 2), Const(-1.0))
        assert evaluate(e, {"x": 1.0}) == 0.0

    def test_fractional_exponent_rejected(self):
        with pytest.raises(ExprSyntaxError, match="non-integer exponent"):
            parse_expr({"pow": [{"var": "x"}, 2.5]})

    def test_negative_exponent_rejected(self):
        with pytest.raises(ExprSyntaxError):
            parse_expr({"pow": [{"var": "x"}, -1]})
        with pytest.raises(ValueError):
            Pow(Var("x"), -2)

    def test_unknown_operator(self):
        with pytest.raises(ExprSyntaxError, match="unknown operator"):
            parse_expr({"div": [{"var": "x"}, {"const": 2}]})

    def test_error_location_is_json_path(self):
        with pytest.raises(ExprSyntaxError) as info:
            parse_expr({"add": [{"var": "x"}, {"pow": [{"var": "y"}, 0.5]}]})
        assert info.value.location == "$.add[1].pow[1]"

    def test_add_needs_two_children(self):
        with pytest.raises(ExprSyntaxError):
            parse_expr({"add": [{"var": "x"}]})

    def test_nary_add_folds_left(self):
        e = parse_expr({"add": [{"var": "a"}, {"var": "b"}, {"var": "c"}]})
        assert e == Add(Add(Var("a"), Var("b")), Var("c"))

    def test_infix(self):
        e = parse_expr("u1^4 + v1^4 - 2*u1*v1")
        assert evaluate(e, {"u1": 1.0, "v1": 2.0}) == 1 + 16 - 4
        assert evaluate(parse_expr("-x**2 + sin(y)*exp(0)"), {"x": 3, "y": 0}) == -9

    def test_infix_syntax_error_has_offset(self):
        with pytest.raises(ExprSyntaxError) as info:
            parse_expr("x + * y")
        assert isinstance(info.value.location, int)

    def test_json_string_source(self):
        assert parse_expr('{"var": "q"}') == Var("q")

    @given(exprs())
    @settings(max_examples=200, deadline=None)
    def test_json_round_trip(self, e):
        tree = to_json(e)
        again = parse_expr(json.loads(json.dumps(tree)))
        assert again == e
        assert to_json(again) == tree

    @given(exprs())
    @settings(max_examples=200, deadline=None)
    def test_text_round_trip(self, e):
        assert parse_expr(to_text(e)) == e


class TestEvaluate:
    def test_examples(self):
        c = parse_expr("x^2 - 1")
        assert evaluate(c, {"x": 1.0}) == 0.0
        assert evaluate(c, {"x": 0.0}) == -1.0
        assert evaluate(Mul(Sin(Var("x")), Var("x")), {"x": 0.0}) == 0.0

    def test_missing_variable(self):
        with pytest.raises(MissingVariableError):
            evaluate(parse_expr("x*y"), {"x": 1.0})

    def test_point_order_and_contents(self):
        p = Point(["b", "a"], [1.0, 2.0])
        assert list(p) == ["b", "a"]
        np.testing.assert_array_equal(p.as_vector(), [1.0, 2.0])
        with pytest.raises(ValueError):
            Point(["a", "a"], [1, 2])
        with pytest.raises(ValueError):
            Point(["a"], [1, 2])

    def test_variables_of(self):
        assert variables_of(parse_expr("x*y + sin(z) + 3")) == {"x", "y", "z"}

    @given(exprs(), st.integers(0, 10_000))
    @settings(max_examples=100, deadline=None)
    def test_matches_sympy(self, e, seed):
        pt = random_point(np.random.default_rng(seed))
        ref = float(to_sympy(e).evalf(subs={sp.Symbol(k): v for k, v in pt.items()}))
        assert evaluate(e, pt) == pytest.approx(ref, rel=1e-12, abs=1e-12)


class TestDerivatives:
    def test_examples(self):
        x2 = parse_expr("x^2")
        np.testing.assert_array_equal(grad(x2, {"x": 3.0}), [6.0])
        np.testing.assert_array_equal(grad(parse_expr("x^2 - 1"), {"x": 1.0}), [2.0])
        np.testing.assert_array_equal(grad(parse_expr("x*y"), Point(["x", "y"], [2, 5])),
                                      [5.0, 2.0])
        np.testing.assert_array_equal(hess(x2, {"x": 7.0}), [[2.0]])
        np.testing.assert_array_equal(hess(parse_expr("x*y"), Point(["x", "y"], [-3, 8])),
                                      [[0.0, 1.0], [1.0, 0.0]])
        np.testing.assert_array_equal(hess(parse_expr("x^4"), {"x": 1.0}), [[12.0]])

    def test_declared_order(self):
        p = Point(["y", "x"], [5.0, 2.0])
        np.testing.assert_array_equal(grad(parse_expr("x*y + x"), p), [2.0, 6.0])

    def test_missing_variable(self):
        with pytest.raises(MissingVariableError):
            grad(parse_expr("x*y"), {"x": 1.0})
        with pytest.raises(MissingVariableError):
            hess(parse_expr("x*y"), {"y": 1.0})

    @given(exprs(), st.integers(0, 10_000))
    @settings(max_examples=100, deadline=None)
    def test_gradient_matches_sympy(self, e, seed):
        pt = random_point(np.random.default_rng(seed))
        se = to_sympy(e)
        subs = {sp.Symbol(k): v for k, v in pt.items()}
        ref = [float(sp.diff(se, sp.Symbol(v)).evalf(subs=subs)) for v in NAMES]
        assert rel_err(grad(e, Point(NAMES, [pt[v] for v in NAMES])), ref) <= 1e-10

    @given(exprs(), st.integers(0, 10_000))
    @settings(max_examples=100, deadline=None)
    def test_finite_differences(self, e, seed):
        pt = random_point(np.random.default_rng(seed))
        x = np.array([pt[v] for v in NAMES])
        g = grad(e, Point(NAMES, x))
        assert rel_err(g, fd_gradient(expr_fun(e), x)) <= 1e-6
        H = hess(e, Point(NAMES, x))
        assert np.array_equal(H, H.T)
        fd_H = fd_jacobian(lambda v: grad(e, Point(NAMES, v)), x)
        assert rel_err(H, fd_H) <= 1e-5

    def test_compiled_matches_tree(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            e = random_expr(rng, 4)
            pt = random_point(rng)
            x = np.array([pt[v] for v in NAMES])
            ce = CompiledExpr(e, NAMES)
            assert ce.value(x) == pytest.approx(evaluate(e, pt), rel=1e-13, abs=1e-13)
            np.testing.assert_allclose(ce.gradient(x), grad(e, pt), rtol=1e-12, atol=1e-12)
            H = ce.hessian(x)
            assert np.array_equal(H, H.T)
            np.testing.assert_allclose(H, hess(e, Point(NAMES, x)), rtol=1e-12, atol=1e-12)

    def test_compiled_rejects_undeclared(self):
        with pytest.raises(MissingVariableError):
            CompiledExpr(parse_expr("x + w"), ("x",))

    def test_concurrent_evaluation(self):
        e = parse_expr("sin(x)*exp(y) + (x - y)^3")
        ce = CompiledExpr(e, ("x", "y"))
        pts = np.random.default_rng(0).uniform(-1, 1, (200, 2))
        expected = [ce.gradient(p) for p in pts]
        results = [None] * 4

        def work(slot):
            results[slot] = [ce.gradient(p) for p in pts]

        threads = [threading.Thread(target=work, args=(i,)) for i in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        for res in results:
            np.testing.assert_array_equal(np.array(res), np.array(expected))

    def test_pow_zero(self):
        e = Pow(Var("x"), 0)
        assert evaluate(e, {"x": 0.0}) == 1.0
        assert grad(e, {"x": 2.0})[0] == 0.0
        assert math.isfinite(hess(e, {"x": 0.0})[0, 0])
