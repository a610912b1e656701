import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from subsolve.dsl import (Dims, DSLSyntaxError, DomainError, Flat, Mul, Neg, SymbolFn,
                          UnknownVariableError, Var, diff_expr, parse_expr, to_string)

D = Dims(1, 1)
VARS = D.variables


def test_parse_examples():
    assert parse_expr("-t*xi1", D) == Mul(Neg(Var("t")), Var("xi1"))
    e = parse_expr("flat(t)", D)
    assert isinstance(e, Flat) and e.arg == Var("t") and e.m == 0 and e.parity == 0


def test_syntax_error_offset():
    with pytest.raises(DSLSyntaxError) as exc:
        parse_expr("t +", D)
    assert exc.value.pos == 3


def test_unknown_variable():
    with pytest.raises(UnknownVariableError):
        parse_expr("z + 1", D)


def test_diff_examples():
    d = diff_expr(parse_expr("-t*xi1", D), "t")
    assert SymbolFn(d, VARS).evaluate({"xi1": 2.5}) == pytest.approx(-2.5)
    d2 = diff_expr(parse_expr("t^2*sin(x1)", D), "xi1")
    assert SymbolFn(d2, VARS).evaluate({"t": 0.7, "x1": 0.3}) == 0.0


@pytest.mark.parametrize("t", [-0.5, 0.5])
def test_flat_derivative_matches_fd(t):
    s = SymbolFn("flat(t)", VARS)
    exact = s.evaluate({"t": t}, {"t": 1})
    assert exact == pytest.approx(math.exp(-1 / abs(t)) * np.sign(t) / t ** 2, rel=1e-14)
    h = 1e-5
    fd = (s.evaluate({"t": t + h}) - s.evaluate({"t": t - h})) / (2 * h)
    assert abs(fd - exact) / abs(exact) < 1e-8


def test_flat_vanishes_at_origin():
    jet = SymbolFn("flat(t)", VARS).jet({"t": 0.0}, 3, ("t",))
    assert all(v == 0 for v in jet.values())


def test_jet_linear():
    jet = SymbolFn("-t*xi1", VARS).jet({"t": 2.0, "xi1": 3.0}, 1, ("t", "xi1"))
    assert jet[(0, 0)] == -6 and jet[(1, 0)] == -3 and jet[(0, 1)] == -2


def test_jet_sin_matches_fd():
    s = SymbolFn("sin(t)*xi1^2", VARS)
    p = {"t": 0.3, "xi1": 2.0}
    jet = s.jet(p, 2, ("t", "xi1"))
    h = 1e-4
    f = lambda dt, dx: s.evaluate({"t": 0.3 + dt, "xi1": 2.0 + dx})
    assert abs(jet[(2, 0)] - (f(h, 0) - 2 * f(0, 0) + f(-h, 0)) / h ** 2) < 1e-6
    assert abs(jet[(1, 1)] - (f(h, h) - f(h, -h) - f(-h, h) + f(-h, -h)) / (4 * h * h)) < 1e-6
    assert abs(jet[(0, 2)] - (f(0, h) - 2 * f(0, 0) + f(0, -h)) / h ** 2) < 1e-6


def test_pole_is_domain_error():
    with pytest.raises(DomainError):
        SymbolFn("1/t", VARS).jet({"t": 0.0}, 1, ("t",))


def test_jet_order_cap():
    with pytest.raises(ValueError):
        SymbolFn("t", VARS).jet({"t": 0.0}, 9)


def test_oddflat_is_odd():
    s = SymbolFn("oddflat(t)", VARS)
    assert s.evaluate({"t": -0.4}) == pytest.approx(-s.evaluate({"t": 0.4}))


# random expressions over (t, x1, xi1)

_leaf = st.sampled_from(["t", "x1", "xi1", "0.5", "2", "1.5"])


def _combine(children):
    bins = st.tuples(children, st.sampled_from(["+", "-", "*"]), children).map(
        lambda p: f"({p[0]} {p[1]} {p[2]})")
    funs = st.tuples(st.sampled_from(["sin", "cos", "exp"]), children).map(
        lambda p: f"{p[0]}({p[1]})")
    pows = st.tuples(children, st.integers(2, 3)).map(lambda p: f"({p[0]})^{p[1]}")
    return bins | funs | pows


expressions = st.recursive(_leaf, _combine, max_leaves=6)
points = st.tuples(*[st.floats(-0.8, 0.8) for _ in range(3)])


@settings(max_examples=200, deadline=None)
@given(expressions, points)
def test_jet_matches_central_differences(text, p):
    names = ("t", "x1", "xi1")
    s = SymbolFn(text, VARS)
    base = dict(zip(names, p))
    jet = s.jet(base, 2, names)
    h = 1e-4

    def at(shift):
        q = dict(base)
        for k, v in shift.items():
            q[k] += v
        return complex(s.evaluate(q))

    scale = 1 + max(abs(v) for v in jet.values())
    for i, a in enumerate(names):
        fd1 = (at({a: h}) - at({a: -h})) / (2 * h)
        one = tuple(int(j == i) for j in range(3))
        assert abs(jet[one] - fd1) <= 1e-6 * scale
        two = tuple(2 * int(j == i) for j in range(3))
        fd2 = (at({a: h}) - 2 * at({}) + at({a: -h})) / h ** 2
        assert abs(jet[two] - fd2) <= 1e-6 * scale * 10


@settings(max_examples=100, deadline=None)
@given(expressions)
def test_print_parse_roundtrip(text):
    e = parse_expr(text, D)
    assert parse_expr(to_string(e), D) == e


@settings(max_examples=50, deadline=None)
@given(expressions, points)
def test_diff_then_eval_equals_jet(text, p):
    s = SymbolFn(text, VARS)
    base = dict(zip(("t", "x1", "xi1"), p))
    jet = s.jet(base, 1, ("t", "x1", "xi1"))
    for i, v in enumerate(("t", "x1", "xi1")):
        direct = complex(SymbolFn(diff_expr(s.expr, v), VARS).evaluate(base))
        assert direct == jet[tuple(int(j == i) for j in range(3))]


def test_realness_flag():
    s = SymbolFn("-t*xi1 + x1^2", VARS, real=True)
    v = s.evaluate({"t": np.linspace(-1, 1, 5), "xi1": 1.0, "x1": 0.2})
    assert not np.iscomplexobj(v)
