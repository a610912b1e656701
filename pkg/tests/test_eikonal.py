import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_op
from subsolve.errors import PositivityLost
from subsolve.eikonal import choose_w2_init, eikonal_residual, solve_eikonal
from subsolve.polynomials import table


def k1(K=3, h=1e-3, window=(-1.4, 1.4)):
    op = make_op("-t*xi1")
    return op, solve_eikonal(op, (0.0, [0.0], [1.0]), K, [[1j]], window, h=h)


def test_multi_index_table_complete():
    tab = table(2, 4)
    alphas = [tuple(a) for a in tab.alphas]
    want = {(i, j) for i in range(5) for j in range(5) if 2 <= i + j <= 4}
    got = {a for a in alphas if 2 <= sum(a) <= 4}
    assert got == want


def test_w2_init_examples():
    c = choose_w2_init([0.0], [0.0])
    assert c.branch == "dxi_zero" and np.allclose(c.w2, [[1j]])
    c = choose_w2_init([2.0], [1.0], kappa_max=1.0)
    assert c.branch == "least_squares"
    assert c.w2[0, 0].real == pytest.approx(-2.0)
    assert c.kappa == pytest.approx(0.5, rel=1e-9)
    c = choose_w2_init([3.0], [0.0], c_target=1.0)
    assert c.kappa == 18.0


def test_k1_closed_forms():
    _, sol = k1()
    t = sol.t
    x0, xi0, w0, w = sol.coefficients(t)
    assert np.max(np.abs(x0)) < 1e-12
    assert np.max(np.abs(xi0[:, 0] - (1 - t ** 2 / 2))) < 1e-10
    assert np.max(np.abs(w0.imag - (t ** 2 / 2 - t ** 4 / 8))) < 1e-10
    assert np.max(np.abs(w0.real)) < 1e-10
    assert np.max(np.abs(sol.w2(t)[..., 0, 0] - 1j)) < 1e-10


def test_k1_phase_values():
    _, sol = k1()
    om, _, _ = sol.eval_phase(0.0, np.array([0.0]))
    assert abs(om) < 1e-14
    om, _, _ = sol.eval_phase(1.0, np.array([0.0]))
    assert om == pytest.approx(0.375j, abs=1e-10)
    x = np.linspace(-0.5, 0.5, 11)
    om, _, _ = sol.eval_phase(0.0, x[:, None])
    assert np.allclose(om, x + 0.5j * x ** 2, atol=1e-14)


def test_window_check():
    _, sol = k1(window=(-0.5, 0.5))
    with pytest.raises(ValueError):
        sol.eval_phase(0.7, np.array([0.0]))


def test_f_without_fibre_dependence():
    op = make_op("-t")
    sol = solve_eikonal(op, (0.0, [0.2], [1.0]), 3, [[1j]], (-1, 1))
    x0, xi0, w0, w = sol.coefficients(sol.t)
    assert np.allclose(x0, 0.2) and np.allclose(xi0, 1.0)
    assert np.allclose(sol.w2(sol.t)[..., 0, 0], 1j)
    assert np.allclose(w0.imag, sol.t ** 2 / 2, atol=1e-12)


def test_flat_region_is_stationary():
    op = make_op("-oddflat(t)*xi1 - oddflat(t)*x1^2")
    sol = solve_eikonal(op, (0.0, [0.0], [1.0]), 3, [[1j]], (-0.02, 0.02))
    x0, xi0, w0, w = sol.coefficients(sol.t)
    assert np.max(np.abs(xi0 - 1)) < 1e-20
    assert np.max(np.abs(w - w[0])) < 1e-20


def test_positivity_lost():
    op = make_op("-5*xi1^2")
    with pytest.raises(PositivityLost):
        solve_eikonal(op, (0.0, [0.0], [1.0]), 3, [[1j]], (0.0, 1.0), c_floor=0.5)


def test_residual_exact_for_k1():
    op, sol = k1()
    t = np.linspace(-1, 1, 9)[:, None]
    x = np.linspace(-0.5, 0.5, 7)[None, :, None]
    r = eikonal_residual(sol, op, t, x)
    assert np.max(np.abs(r.values)) < 1e-12


def test_residual_zero_for_f_of_t():
    op = make_op("-t")
    sol = solve_eikonal(op, (0.0, [0.0], [1.0]), 3, [[1j]], (-1, 1))
    r = eikonal_residual(sol, op, np.linspace(-1, 1, 5)[:, None],
                         np.linspace(-1, 1, 5)[None, :, None])
    assert np.max(np.abs(r.values)) < 1e-12


def test_residual_order_four():
    op = make_op("-t*xi1 - x1^2*xi1")
    sol = solve_eikonal(op, (0.0, [0.0], [1.0]), 3, [[1j]], (-0.5, 0.5))
    s = np.logspace(-3, -1, 21)
    for t in (-0.4, -0.2, 0.2, 0.4):
        x0 = sol.coefficients(t)[0][0]
        r = eikonal_residual(sol, op, np.full(s.size, t), (x0 + s)[:, None])
        assert r.slope >= 3.8


def test_rk4_order():
    op = make_op("-t*xi1 - 0.1*sin(x1)*xi1")
    seed = (0.0, [0.1], [1.0])
    sols = [solve_eikonal(op, seed, 3, [[1j]], (-1, 1), h=h) for h in (0.1, 0.05, 0.025)]
    ref = sols[-1].state(sols[0].t)
    e1 = np.max(np.abs(sols[0].y - ref))
    e2 = np.max(np.abs(sols[1].state(sols[0].t) - ref))
    assert np.log2(e1 / e2) >= 3.7


@settings(max_examples=5, deadline=None)
@given(st.floats(-0.3, 0.3), st.floats(0.5, 1.5), st.floats(-0.2, 0.2))
def test_w0_real_part_identity(x0, xi0, a):
    op = make_op(f"-t*xi1 + ({a!r})*x1*xi1 - 0.1*x1^2")
    sol = solve_eikonal(op, (0.0, [x0], [xi0]), 4, [[1j]], (-0.6, 0.6), h=1e-2)
    dx0, _, dw0, _ = sol.rates(sol.t)
    lhs = dw0.real - np.einsum("ij,ij->i", dx0, sol.xi0)
    assert np.max(np.abs(lhs)) < 1e-9


@settings(max_examples=5, deadline=None)
@given(st.floats(0.5, 2.0))
def test_im_w0_nonnegative(kappa):
    op = make_op("-t*xi1 - 0.3*t*x1^2")
    sol = solve_eikonal(op, (0.0, [0.0], [1.0]), 3, [[kappa * 1j]], (-0.8, 0.8))
    assert np.min(sol.w0.imag) >= -1e-14
    assert sol.min_im_w2() > 0
