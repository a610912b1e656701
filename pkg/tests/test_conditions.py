import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_op
from subsolve.conditions import (check_cond1, check_cond2a, detect_sign_change,
                                 intlem_min_bound, minimal_bichar_search, select_interval_I)
from subsolve.dsl import Dims, SymbolFn
from subsolve.eikonal import solve_eikonal

D = Dims(1, 1)
SEED = {"x1": 0.0, "xi1": 1.0}
PS_VARS = ("t", "x1", "y1", "xi1")


def sym(text):
    return SymbolFn(text, D.variables, real=True)


@pytest.mark.parametrize("text,kind,k", [("-t", "finite", 1), ("-t^3", "finite", 3),
                                         ("t", "wrong_direction", None),
                                         ("-oddflat(t)", "infinite", None),
                                         ("1 + t^2", "none", None)])
def test_sign_change_examples(text, kind, k):
    rep = detect_sign_change(sym(text), SEED, (-1, 1))
    assert rep.kind == kind
    if k is not None:
        assert rep.k == k and abs(rep.t_star) < 1e-9


@settings(max_examples=20, deadline=None)
@given(st.sampled_from([1, 3, 5]), st.floats(-0.3, 0.3), st.sampled_from([1e-6, 1e-8, 1e-9]))
def test_odd_power_is_finite_k(k, shift, tol):
    f = sym(f"-(t - ({shift!r}))^{k}")
    rep = detect_sign_change(f, SEED, (-1, 1), tol=tol, order_cap=12)
    assert rep.kind == "finite" and rep.k == k


@settings(max_examples=20, deadline=None)
@given(st.sampled_from(["-t", "-t^3", "-t*(1 + t^2)", "-t + 0.2*t^2", "t", "-t^3 - 0.1*t^4"]))
def test_mirror_consistency(text):
    f = sym(text)
    g = SymbolFn(f"-({text.replace('t', '(-t)')})", D.variables, real=True)
    a = detect_sign_change(f, SEED, (-1, 1))
    b = detect_sign_change(g, SEED, (-1, 1))
    assert a.kind == b.kind and a.k == b.k


def test_cond1_examples():
    grid = {"t": (-0.5, 0.5, 5), "x1": (-1, 1, 21), "y1": (-3, 3, 61), "xi1": (-1, 1, 21)}
    r = check_cond1(SymbolFn("1 + t", PS_VARS), D, grid)
    assert r.status == "pass" and r.constants["C0"] == 0
    re = SymbolFn("(1 + y1^2)*x1", PS_VARS)
    im = SymbolFn("(1 + y1^2)*xi1", PS_VARS)
    r = check_cond1((re, im), D, grid)
    assert r.status == "pass" and r.constants["C0"] <= 1.0
    assert r.constants["C0"] == pytest.approx(1.0, rel=0.05)
    r = check_cond1((SymbolFn("y1", PS_VARS), SymbolFn("xi1", PS_VARS)), D, grid)
    assert r.status == "fail"


def test_cond1_empty_samples():
    with pytest.raises(ValueError):
        check_cond1(SymbolFn("y1", PS_VARS), D, {})


REGION = {"t": (-0.5, 0.5, 401), "x1": (-0.25, 0.25, 5), "xi1": (0.75, 1.25, 5),
          "y1": (-0.5, 0.5, 5)}


def test_cond2a_finite_not_required():
    op = make_op("-t*xi1")
    rep = detect_sign_change(op.f, SEED, (-1, 1))
    assert check_cond2a(op, REGION, rep).status == "not_required"


def test_cond2a_infinite_cases():
    op = make_op("-oddflat(t)*xi1", B=(("flat(2*t)",),))
    rep = detect_sign_change(op.f, SEED, (-1, 1))
    assert rep.kind == "infinite"
    ok = check_cond2a(op, REGION, rep)
    assert ok.status == "pass" and ok.constants["eps"] >= 0.5
    bad = check_cond2a(make_op("-oddflat(t)*xi1"), REGION, rep)
    assert bad.status == "fail"


def test_minimal_bichar_examples():
    res = minimal_bichar_search(sym("-t"), (-1, 1), {"x1": (-0.5, 0.5, 5)})
    assert res.L == pytest.approx(0, abs=1e-12) and res.seed["x1"] == 0
    f = lambda t, x1: np.maximum(-t, 0) ** 3 - np.maximum(t - abs(x1), 0) ** 3
    res = minimal_bichar_search(f, (-1, 1), {"x1": (0.1, 0.5, 5)}, t_samples=2001)
    assert res.seed["x1"] == pytest.approx(0.1)
    assert res.L == pytest.approx(0.1, abs=2e-3)
    with pytest.raises(ValueError):
        minimal_bichar_search(sym("1 + t^2"), (-1, 1), {"x1": (-0.5, 0.5, 3)})


def test_intlem_examples():
    t = np.linspace(-1, 1, 20001)
    r = intlem_min_bound(t, -t ** 2 / 2, -0.3, 1.0, 0.5, dF=-t)
    assert r.kappa == pytest.approx(0.3) and r.min_F == pytest.approx(-0.045) and r.passed
    r = intlem_min_bound(t, -t ** 4 / 4, -0.5, 1 / 3, 0.25, dF=-t ** 3)
    assert r.kappa == pytest.approx(0.125) and r.passed


def test_intlem_precondition():
    t = np.linspace(-1, 1, 2001)
    r = intlem_min_bound(t, t ** 2, -0.3, 1.0, 0.5)
    assert r.passed is None and r.diagnostic


def _k1_solution(window=(-1.0, 1.0)):
    op = make_op("-t*xi1", B=(("0",),))
    return op, solve_eikonal(op, (0.0, [0.0], [1.0]), 3, [[1j]], window)


def test_interval_closed_form():
    op, sol = _k1_solution()
    I = select_interval_I(op, sol, 2.0, 1.0)
    # |f| = |t|(1 - t^2/2) plus the integral of |A0| = |t|
    from scipy.optimize import brentq
    a = brentq(lambda s: s * (1 - s * s / 2) + s * s / 2 - 0.125, 0, 0.5)
    assert I.lo == pytest.approx(-a, abs=1e-5) and I.hi == pytest.approx(a, abs=1e-5)


def test_interval_zero_symbol_truncates():
    op = make_op("0", B=(("0",),))
    sol = solve_eikonal(op, (0.0, [0.0], [1.0]), 3, [[1j]], (-1, 1))
    I = select_interval_I(op, sol, 2.0, 1.0)
    assert I.truncated and (I.lo, I.hi) == (-1.0, 1.0)


def test_interval_constant_A():
    op = make_op("0", A=("0.5",), B=(("0",),))
    sol = solve_eikonal(op, (0.0, [0.0], [1.0]), 3, [[1j]], (-1, 1))
    rho = 2.0
    I = select_interval_I(op, sol, rho, 1.0)
    assert I.hi == pytest.approx(1 / (0.5 * rho ** 3), rel=1e-3)
    assert I.lo == pytest.approx(-1 / (0.5 * rho ** 3), rel=1e-3)


@settings(max_examples=10, deadline=None)
@given(st.floats(1.2, 3.0), st.floats(1.05, 2.0))
def test_interval_shrinks_with_rho(rho, factor):
    op, sol = _k1_solution()
    a = select_interval_I(op, sol, rho, 1.0)
    b = select_interval_I(op, sol, rho * factor, 1.0)
    assert a.lo <= b.lo and b.hi <= a.hi
