import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_op
from subsolve.config import resolve_config
from subsolve.eikonal import solve_eikonal
from subsolve.errors import ExactUnavailable, NumericalError, ResolutionError
from subsolve.harness import build_for_lambda, fit_slope, run_checks, run_eikonal
from subsolve.metrics import (NormField, apply_operator_exact, polynomial_split,
                              residual_via_expansion, sobolev_norm, solvability_ratio)
from subsolve.quasimode import Grid, assemble_quasimode, auto_grid
from subsolve.transport import TransportSettings, build_amplitudes, build_cutoff_chi

PI14 = math.pi ** 0.25


def line(n=512, L=12.0):
    g = Grid((0.0,), (L,), (n,), ("x",))
    return g, g.axes[0]


def test_gaussian_l2():
    g, x = line()
    f = NormField(g, np.exp(-x ** 2 / 2).astype(complex))
    assert sobolev_norm(f, 0) == pytest.approx(1.331336, abs=1e-6)
    assert f.l2_freq() == pytest.approx(PI14, rel=1e-12)


def test_modulated_gaussian_negative_norm():
    g, x = line(4096)
    mu = 100.0
    f = NormField(g, np.exp(1j * mu * x - x ** 2 / 2))
    assert sobolev_norm(f, -2) == pytest.approx(mu ** -2 * PI14, rel=0.02)


def test_zero_field():
    g, x = line(64)
    f = NormField(g, np.zeros(64, dtype=complex))
    for s in (-3, 0, 2):
        assert sobolev_norm(f, s) == 0.0


def test_leakage_refused():
    g, x = line(256, 3.0)
    f = NormField(g, np.exp(-x ** 2 / 2).astype(complex))
    with pytest.raises(ResolutionError):
        sobolev_norm(f, -1)


fields = st.integers(0, 2 ** 32 - 1).map(lambda seed: np.random.default_rng(seed))


def _random_field(rng):
    g = Grid((0.0, 0.0), (6.0, 4.0), (32, 16), ("a", "b"))
    A, B = np.meshgrid(*g.axes, indexing="ij")
    c = rng.normal(size=4)
    v = np.exp(-(A - c[0]) ** 2 - (B - c[1]) ** 2 / 0.5 + 1j * (c[2] * A + 3 * c[3] * B))
    return NormField(g, v, leak_tol=1.0)


@settings(max_examples=30, deadline=None)
@given(fields)
def test_parseval(rng):
    f = _random_field(rng)
    assert abs(f.l2_space() - f.l2_freq()) <= 1e-10 * f.l2_space()


@settings(max_examples=30, deadline=None)
@given(fields, st.floats(-4, 4), st.floats(0, 3))
def test_weight_monotone(rng, s1, ds):
    f = _random_field(rng)
    assert sobolev_norm(f, s1, check=False) <= sobolev_norm(f, s1 + ds, check=False)


@pytest.mark.parametrize("N", [1, 2])
def test_plane_wave_slope(N):
    g, x = line(4096)
    pairs = []
    for mu in (64.0, 128.0, 256.0):
        f = NormField(g, np.exp(1j * mu * x - x ** 2 / 2))
        pairs.append((math.log(mu), math.log(sobolev_norm(f, -N))))
    assert fit_slope(pairs).slope == pytest.approx(-N, abs=0.1)
    assert math.exp(pairs[-1][1]) * 256.0 ** N == pytest.approx(PI14, rel=0.01)


def test_ratio_examples():
    assert solvability_ratio(1e-3, 1e-9, 1e-12).value == pytest.approx(9.99e5, rel=1e-3)
    r = solvability_ratio(1.0, 0.0, 0.0)
    assert r.infinite and r.value == math.inf
    with pytest.raises(NumericalError, match="undefined ratio"):
        solvability_ratio(0.0, 0.0, 0.0)


def test_exact_unavailable():
    with pytest.raises(ExactUnavailable, match="exact application unavailable"):
        polynomial_split(make_op("sqrt(1 + xi1^2)*(-t)"))
    with pytest.raises(ExactUnavailable):
        polynomial_split(make_op("-t*xi1", A=("eta1",)))
    polynomial_split(make_op("-t*xi1 + x1*xi1^2"))


@pytest.fixture(scope="module")
def k1_32():
    cfg = resolve_config("model-k1").with_overrides(transport={"K_amp": 2})
    sol = run_eikonal(cfg, run_checks(cfg))
    qm, _ = build_for_lambda(cfg, sol, 32.0)
    return cfg, qm, auto_grid(qm)


def test_expansion_order_monotone(k1_32):
    cfg, qm, grid = k1_32
    ex = apply_operator_exact(cfg.operator, qm, grid).values
    diffs = [np.max(np.abs(ex - residual_via_expansion(cfg.operator, qm, grid, o).values))
             for o in (0, 1, 2)]
    assert diffs[0] >= diffs[1] >= diffs[2]
    assert diffs[2] <= 1e-10 * np.max(np.abs(ex))


def test_expansion_order_zero_formula(k1_32):
    cfg = resolve_config("model-k1").with_overrides(
        operator={"f": "-t*xi1 - x1^2*xi1"}, window=[-0.6, 0.6], transport={"K_amp": 1})
    sol = run_eikonal(cfg, run_checks(cfg))
    qm, _ = build_for_lambda(cfg, sol, 32.0)
    grid = auto_grid(qm)
    r0 = residual_via_expansion(cfg.operator, qm, grid, 0).values
    t = grid.axes[0][::7]
    parts = qm.chunk(t, grid.axes[1:2], grid.axes[2:], derivatives=True)
    xg = parts["x"][..., 0]
    f = -(t[:, None, None] + xg ** 2) * parts["omega_x"][..., 0]
    want = parts["phase"] * 32.0 * (parts["omega_t"] + 1j * f) * parts["a"]
    assert np.max(np.abs(r0[::7] - want)) <= 1e-12 * np.max(np.abs(want))
    assert np.max(np.abs(want)) > 0


def test_zero_amplitude_gives_zero(k1_32):
    cfg, qm, grid = k1_32
    sol = qm.sol
    chi = qm.chi
    rho = 32.0 ** (1 / cfg.N)
    amp, coeffs = build_amplitudes(cfg.operator, sol, rho, cfg.transport, chi.support, chi=chi)
    amp0, _ = build_amplitudes(cfg.operator, sol, rho, cfg.transport, chi.support, chi=chi,
                               bump=np.zeros(tuple(a.size for a in coeffs.Y_axes)))
    q0 = assemble_quasimode(sol, amp0, 32.0, cfg.N, chi=chi)
    r = residual_via_expansion(cfg.operator, q0, grid, 2)
    assert not np.any(r.values)


def test_product_rule_against_closure():
    # P* = D_t + i f with f = -t: compare with a finite-difference D_t of the closure
    op = make_op("-t", B=(("0",),))
    sol = solve_eikonal(op, (0.0, [0.0], [1.0]), 3, [[1j]], (-1, 1))
    lam, N = 32.0, 12
    rho = lam ** (1 / N)
    chi = build_cutoff_chi((-0.3, 0.3), sol.window)
    st_ = TransportSettings(K_amp=1, M_x=2, y_points=64, y_half_width=1.0, t_points=401)
    amp, _ = build_amplitudes(op, sol, rho, st_, chi.support, chi=chi)
    qm = assemble_quasimode(sol, amp, lam, N, chi=chi)
    grid = Grid((0.0, 0.0, 0.0), (0.6, 0.5, 0.5), (64, 32, 32), ("t", "x1", "y1"))
    pu = apply_operator_exact(op, qm, grid).values
    rng = np.random.default_rng(7)
    axes = grid.axes
    h = 1e-5
    for _ in range(10):
        i, j, k = rng.integers(8, 56), rng.integers(12, 20), rng.integers(12, 20)
        t, x, y = axes[0][i], [axes[1][j]], [axes[2][k]]
        u = lambda s: qm(t + s, x, y)
        dt = (8 * (u(h) - u(-h)) - (u(2 * h) - u(-2 * h))) / (12 * h)
        oracle = -1j * dt + 1j * lam * (-t) * u(0.0)
        scale = abs(dt) + lam * abs(t * u(0.0))
        assert abs(pu[i, j, k] - oracle) <= 1e-9 * scale
