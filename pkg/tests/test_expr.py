import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eigenframe.expr import (
    EvalDomainError,
    ParseError,
    differentiate,
    evaluate,
    evaluate_array,
    parse_expr,
    simplify,
    substitute,
    to_text,
)
from eigenframe import expr as E

from conftest import rng_exprs, random_points


# ---------------------------------------------------------------------------
# parsing

def test_parse_product():
    e = parse_expr("u1*u2", ["u1", "u2"])
    assert e.kind == "mul"
    assert {a.name for a in e.args} == {"u1", "u2"}


def test_parse_neg_sqrt_neg():
    # shape of the sound-speed expression: neg(sqrt(neg(var)))
    e = parse_expr("-sqrt(-p_v)", ["p_v"])
    assert e.kind == "neg"
    assert e.args[0].kind == "sqrt"
    assert e.args[0].args[0].kind == "neg"
    assert e.args[0].args[0].args[0].name == "p_v"


def test_parse_difference_of_product():
    e = parse_expr("u3 - u1*u2", ["u1", "u2", "u3"])
    assert e.kind == "sub"
    assert e.args[0].name == "u3"
    assert e.args[1].kind == "mul"


def test_unary_minus_binds_inside_power():
    # the grammar nests '-' inside base, so -x^2 is (-x)^2
    e = parse_expr("-u1^2", ["u1"])
    assert evaluate(e, {"u1": 3.0}) == 9.0


def test_parse_errors_carry_offsets():
    with pytest.raises(ParseError) as err:
        parse_expr("u1 + ", ["u1"])
    assert err.value.offset == 5
    with pytest.raises(ParseError, match="unknown identifier"):
        parse_expr("u1 + bogus", ["u1"])
    with pytest.raises(ParseError, match="unknown function"):
        parse_expr("foo(u1)", ["u1"])
    with pytest.raises(ParseError, match="takes 1 argument"):
        parse_expr("sin(u1, u1)", ["u1"])
    with pytest.raises(ParseError, match="trailing"):
        parse_expr("u1 u1", ["u1"])


def test_number_formats():
    for text, val in [("2", 2.0), ("2.5", 2.5), (".5", 0.5), ("1e-3", 1e-3), ("2.5e2", 250.0)]:
        assert evaluate(parse_expr(text, []), {}) == val


# ---------------------------------------------------------------------------
# differentiation

def test_derivative_product_rule():
    e = parse_expr("u1*u2", ["u1", "u2"])
    assert to_text(differentiate(e, "u1")) == "u2"


def test_derivative_of_linear_combination():
    e = parse_expr("u3 - u1*u2", ["u1", "u2", "u3"])
    assert to_text(differentiate(e, "u3")) == "1"


def test_derivative_vs_finite_difference_trig():
    e = parse_expr("r*sin(theta)", ["r", "theta"])
    d = differentiate(e, "r")
    rng = np.random.default_rng(3)
    for _ in range(100):
        p = {"r": float(rng.uniform(0.2, 2)), "theta": float(rng.uniform(0.2, 2))}
        h = 1e-6
        fd = (evaluate(e, {**p, "r": p["r"] + h}) - evaluate(e, {**p, "r": p["r"] - h})) / (2 * h)
        assert abs(evaluate(d, p) - fd) <= 1e-6 * max(1.0, abs(fd))


def test_derivative_all_node_kinds():
    names = ["x"]
    cases = ["sqrt(x)", "exp(x)", "ln(x)", "sin(x)", "cos(x)", "tan(x)", "arctan(x)",
             "x^3", "2^x", "x^x", "x/(1+x)", "-x"]
    for text in cases:
        e = parse_expr(text, names)
        d = differentiate(e, "x")
        for xv in (0.3, 0.7, 1.3):
            h = 1e-6
            fd = (evaluate(e, {"x": xv + h}) - evaluate(e, {"x": xv - h})) / (2 * h)
            assert abs(evaluate(d, {"x": xv}) - fd) <= 1e-5 * max(1.0, abs(fd)), text


# ---------------------------------------------------------------------------
# evaluation

def test_evaluate_basic():
    assert evaluate(parse_expr("u1*u2", ["u1", "u2"]), {"u1": 2, "u2": 3}) == 6.0


def test_evaluate_sqrt_of_negated_symbol():
    e = parse_expr("sqrt(-p_v)", ["p_v"])
    assert evaluate(e, {"p_v": -4.0}) == 2.0


def test_evaluate_division_by_zero():
    e = parse_expr("1/u1", ["u1"])
    with pytest.raises(EvalDomainError, match="division by zero"):
        evaluate(e, {"u1": 0.0})


def test_evaluate_domain_errors_name_subtree():
    with pytest.raises(EvalDomainError, match="sqrt"):
        evaluate(parse_expr("sqrt(u1)", ["u1"]), {"u1": -1.0})
    with pytest.raises(EvalDomainError, match="ln"):
        evaluate(parse_expr("ln(u1)", ["u1"]), {"u1": 0.0})
    with pytest.raises(EvalDomainError):
        evaluate(parse_expr("u1^(0-0.5)", ["u1"]), {"u1": 0.0})
    with pytest.raises(EvalDomainError):
        evaluate(parse_expr("(-2)^(1/2)", []), {})


def test_evaluate_array_matches_scalar():
    e = parse_expr("exp(u1)*sin(u2) + u1/u2", ["u1", "u2"])
    pts = random_points(20, names=("u1", "u2"))
    env = {nm: np.array([p[nm] for p in pts]) for nm in ("u1", "u2")}
    arr = evaluate_array(e, env)
    for i, p in enumerate(pts):
        assert arr[i] == pytest.approx(evaluate(e, p), rel=1e-15)


# ---------------------------------------------------------------------------
# simplification

def test_simplify_neutral_elements():
    u1, u2 = E.var("u1"), E.var("u2")
    e = E.Expr("add", args=(E.Expr("mul", args=(E.const(0.0), u1)), u2))
    assert simplify(e) is u2
    e2 = E.Expr("mul", args=(E.Expr("pow", args=(u1, E.const(1.0))), E.const(1.0)))
    assert simplify(e2) is u1


def test_simplify_cancels_identical_difference():
    e = parse_expr("u1*u2 - u1*u2", ["u1", "u2"])
    assert e.kind == "const" and e.value == 0.0
    # oracle: random-point evaluation equality
    raw = E.Expr("sub", args=(parse_expr("u1*u2", ["u1", "u2"]),) * 2)
    s = simplify(raw)
    for p in random_points(50, names=("u1", "u2")):
        assert abs(evaluate(s, p) - 0.0) < 1e-12


def test_simplify_idempotent_on_random_exprs():
    for e in rng_exprs(60, seed=5):
        s = simplify(e)
        assert simplify(s) == s


def test_constant_folding():
    e = parse_expr("2*3 + 4^2 - 1", [])
    assert e.kind == "const" and e.value == 21.0


def test_no_nonfinite_constants():
    with pytest.raises(E.ExprError):
        E.const(float("inf"))
    # folding that would overflow stays symbolic
    e = parse_expr("exp(1000)", [])
    assert e.kind == "exp"


# ---------------------------------------------------------------------------
# printing round trip

def test_print_parse_roundtrip_random():
    names = ("u1", "u2", "u3")
    for e in rng_exprs(60, seed=9):
        text = to_text(e)
        back = parse_expr(text, names)
        for p in random_points(50, seed=13):
            try:
                a = evaluate(e, p)
            except EvalDomainError:
                continue
            b = evaluate(back, p)
            assert abs(a - b) <= 1e-12 * max(1.0, abs(a))


def test_substitute_composes():
    e = parse_expr("x^2 + y", ["x", "y"])
    out = substitute(e, {"x": parse_expr("u+1", ["u"]), "y": E.const(2.0)})
    assert evaluate(out, {"u": 2.0}) == 11.0


# ---------------------------------------------------------------------------
# hypothesis properties

_names = st.sampled_from(["u1", "u2", "u3"])
_leaf = st.one_of(
    st.floats(min_value=0.3, max_value=2.0).map(lambda v: E.const(round(v, 3))),
    _names.map(E.var),
)


def _combine(children):
    a, b = children
    return st.sampled_from([
        E.add(a, b),
        E.sub(a, b),
        E.mul(a, b),
        E.div(a, E.add(E.mul(b, b), E.const(0.5))),
        E.unary("sin", a),
        E.unary("arctan", E.add(a, b)),
        E.unary("sqrt", E.add(E.mul(a, a), E.const(0.25))),
    ])


_expr_strategy = st.recursive(_leaf, lambda inner: st.tuples(inner, inner).flatmap(_combine),
                              max_leaves=12)


@settings(max_examples=60, deadline=None)
@given(_expr_strategy)
def test_property_simplify_preserves_value(e):
    s = simplify(e)
    for p in random_points(5, seed=17):
        assert evaluate(s, p) == pytest.approx(evaluate(e, p), rel=1e-12, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(_expr_strategy, _names)
def test_property_derivative_matches_finite_difference(e, name):
    d = differentiate(e, name)
    h = 1e-6
    for p in random_points(3, seed=23):
        up = dict(p)
        dn = dict(p)
        up[name] += h
        dn[name] -= h
        try:
            fd = (evaluate(e, up) - evaluate(e, dn)) / (2 * h)
            dv = evaluate(d, p)
        except EvalDomainError:
            continue
        if abs(fd) > 1e4:   # ill-conditioned sample; FD itself unreliable
            continue
        assert abs(dv - fd) <= max(1e-6, 1e-6 * abs(dv))
