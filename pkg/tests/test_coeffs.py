import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qwalk.coeffs import (BinOp, Call, Neg, Num, Param, PointMass, RunningMaxVolatility, Uniform, Var, WalkSpec,
                          compile_expr, eval_expr, free_params, load_spec, parse_expr, regularity_probe, spec_hash,
                          to_text)
from qwalk.errors import (DivisionByZero, EvalError, ExprSyntaxError, NegativeSqrt, NonFiniteResult, SpecError,
                          SpecNotFound, UnboundParameter, UnknownFunctionError)


def test_literal_zero():
    assert parse_expr("0") == Num(0.0)


def test_unary_minus_binds_to_the_factor():
    # unary sits below term in the grammar, so the minus attaches to theta
    assert parse_expr("-theta*x") == BinOp("*", Neg(Param("theta")), Var("x"))
    alt = Neg(BinOp("*", Param("theta"), Var("x")))
    for x in (-2.0, 0.0, 3.5):
        assert eval_expr(parse_expr("-theta*x"), 0.0, x, {"theta": 0.5}) == eval_expr(alt, 0.0, x, {"theta": 0.5})


def test_power_right_assoc_and_minus():
    assert parse_expr("2^3^2") == BinOp("^", Num(2.0), BinOp("^", Num(3.0), Num(2.0)))
    assert eval_expr(parse_expr("-2^2"), 0, 0) == 4.0


def test_precedence():
    assert eval_expr(parse_expr("1+2*3-4/2"), 0, 0) == 5.0
    assert eval_expr(parse_expr("(1+2)*3"), 0, 0) == 9.0


def test_unbalanced_offset():
    with pytest.raises(ExprSyntaxError) as ei:
        parse_expr("sqrt(")
    assert ei.value.offset == 5


@pytest.mark.parametrize("text,offset", [("1+", 2), ("x y", 2), ("(x", 2), ("3*)", 2)])
def test_syntax_offsets(text, offset):
    with pytest.raises(ExprSyntaxError) as ei:
        parse_expr(text)
    assert ei.value.offset == offset


def test_unknown_function():
    with pytest.raises(UnknownFunctionError):
        parse_expr("log(x)")


def test_empty():
    with pytest.raises(ExprSyntaxError):
        parse_expr("  ")


def test_eval_examples():
    assert eval_expr(parse_expr("-theta*x"), 0.0, 2.0, {"theta": 0.5}) == -1.0
    assert eval_expr(parse_expr("sigma0*sqrt(abs(x))"), 0.0, 4.0, {"sigma0": 0.2}) == pytest.approx(0.4, abs=1e-15)


def test_eval_errors():
    with pytest.raises(DivisionByZero):
        eval_expr(parse_expr("1/x"), 0.0, 0.0)
    with pytest.raises(NegativeSqrt):
        eval_expr(parse_expr("sqrt(x)"), 0.0, -1.0)
    with pytest.raises(UnboundParameter):
        eval_expr(parse_expr("k*x"), 0.0, 1.0, {})
    with pytest.raises(NonFiniteResult):
        eval_expr(parse_expr("exp(x)"), 0.0, 1000.0)


def test_compiled_matches_scalar():
    node = parse_expr("a*sin(x) + t^2 - cos(x*t)/(1+abs(x))")
    f = compile_expr(node, {"a": 1.5})
    t = np.linspace(0, 1, 7)[:, None]
    x = np.linspace(-3, 3, 11)[None, :]
    vals, bad = f(t, x)
    assert not bad.any()
    for i in range(7):
        for j in range(11):
            ref = eval_expr(node, float(t[i, 0]), float(x[0, j]), {"a": 1.5})
            assert vals[i, j] == pytest.approx(ref, rel=1e-14, abs=1e-15)


def test_compiled_flags_bad_points():
    vals, bad = compile_expr(parse_expr("1/x"))(0.0, np.array([-1.0, 0.0, 2.0]))
    assert bad.tolist() == [False, True, False]


def test_free_params():
    assert free_params(parse_expr("a*x + b*sqrt(t) - c")) == {"a", "b", "c"}


def test_probe_constant():
    r = regularity_probe(parse_expr("3"), (0, 1), (-5, 5), 16)
    assert (r.sup_abs, r.lipschitz_est, r.d2_est) == (3.0, 0.0, 0.0)


def test_probe_identity():
    r = regularity_probe(parse_expr("x"), (0, 1), (0, 1), 32)
    assert abs(r.lipschitz_est - 1) <= 1e-9


def test_probe_exp():
    r = regularity_probe(parse_expr("exp(x)"), (0, 1), (0, 1), 256)
    assert abs(r.lipschitz_est - math.e) / math.e <= 0.02


def test_probe_grid_too_small():
    with pytest.raises(ValueError):
        regularity_probe(parse_expr("x"), (0, 1), (0, 1), 4)


def test_probe_reports_failing_point():
    with pytest.raises(EvalError) as ei:
        regularity_probe(parse_expr("sqrt(x)"), (0, 1), (-1, 1), 8)
    assert "x=-1" in ei.value.at


# -- random expressions ---------------------------------------------------

leaf = st.one_of(
    # the parser only ever produces non-negative literals
    st.floats(min_value=0, max_value=1e300, allow_nan=False).map(abs).map(Num),
    st.sampled_from([Var("t"), Var("x"), Param("a")]),
)


def _extend(children):
    return st.one_of(
        children.map(Neg),
        st.tuples(st.sampled_from("+-*/^"), children, children).map(lambda a: BinOp(*a)),
        st.tuples(st.sampled_from(["exp", "sqrt", "abs", "sin", "cos"]), children).map(lambda a: Call(*a)),
    )


exprs = st.recursive(leaf, _extend, max_leaves=12)


@given(exprs)
def test_print_parse_round_trip(node):
    parsed = parse_expr(to_text(node))
    assert parsed == node
    assert parse_expr(to_text(parsed)) == parsed


smooth_leaf = st.one_of(
    st.floats(min_value=-5, max_value=5, allow_nan=False).map(Num),
    st.sampled_from([Var("t"), Var("x")]),
)
smooth = st.recursive(
    smooth_leaf,
    lambda c: st.one_of(
        st.tuples(st.sampled_from("+-*"), c, c).map(lambda a: BinOp(*a)),
        st.tuples(st.sampled_from(["sin", "cos", "abs"]), c).map(lambda a: Call(*a)),
    ),
    max_leaves=6,
)


@settings(max_examples=50, deadline=None)
@given(smooth, smooth)
def test_probe_subadditive(f, g):
    rng = ((0.0, 1.0), (-2.0, 2.0), 16)
    a = regularity_probe(f, *rng)
    b = regularity_probe(g, *rng)
    s = regularity_probe(BinOp("+", f, g), *rng)
    slack = 1e-9 * (1 + a.sup_abs + b.sup_abs + a.lipschitz_est + b.lipschitz_est + a.d2_est + b.d2_est)
    assert s.sup_abs <= a.sup_abs + b.sup_abs + slack
    assert s.lipschitz_est <= a.lipschitz_est + b.lipschitz_est + slack
    assert s.d2_est <= a.d2_est + b.d2_est + slack


# -- specs ------------------------------------------------------------------

def test_spec_requires_bound_params():
    with pytest.raises(SpecError):
        WalkSpec("-theta*x", "1", {}, PointMass(0.0))


def test_spec_json_round_trip(tmp_path):
    spec = WalkSpec("-theta*x", "s0", {"theta": 1.0, "s0": 0.5}, Uniform(-1.0, 1.0), RunningMaxVolatility(0.5, 2.0))
    f = tmp_path / "s.json"
    f.write_text(json.dumps(spec.to_dict() | {"tolerance_policy": {"limited_cut": 1e5}}))
    loaded, policy = load_spec(f)
    assert loaded == spec
    assert spec_hash(loaded) == spec_hash(spec)
    assert policy == {"limited_cut": 1e5}


def test_spec_hash_frozen():
    assert spec_hash(WalkSpec("0", "1", {}, PointMass(0.0))) == "afa99f5ed70b549a"


def test_spec_hash_ignores_key_order(tmp_path):
    a = tmp_path / "a.json"
    b = tmp_path / "b.json"
    a.write_text('{"drift": "0", "volatility": "1", "x0": {"point": 0.0}}')
    b.write_text('{"x0": {"point": 0.0},\n  "volatility": "1", "drift": "0"}')
    assert spec_hash(load_spec(a)[0]) == spec_hash(load_spec(b)[0])


def test_missing_spec(tmp_path):
    with pytest.raises(SpecNotFound) as ei:
        load_spec(tmp_path / "nope.json")
    assert ei.value.kind == "spec-not-found"


@pytest.mark.parametrize("doc", [
    '{"drift": "0", "volatility": "1"}',
    '{"drift": "0", "volatility": "1", "x0": {"point": 0}, "extra": 1}',
    '{"drift": 0, "volatility": "1", "x0": {"point": 0}}',
    '{"drift": "0", "volatility": "1", "x0": {"uniform": [1]}}',
    '[1, 2]',
    '{not json',
])
def test_bad_specs(tmp_path, doc):
    f = tmp_path / "s.json"
    f.write_text(doc)
    with pytest.raises(SpecError):
        load_spec(f)
