"""Discrete Sobolev norms and residuals of assembled quasimodes."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dsl import diff_expr, free_vars, is_zero
from .errors import ExactUnavailable, NumericalError, ResolutionError
from .quasimode import Grid, boundary_leakage


@dataclass
class NormField:
    """Complex samples on a periodic grid with a cached unitary transform."""

    grid: Grid
    values: np.ndarray
    leak_tol: float = 1e-10
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        self._hat = None
        self._w2 = None

    @property
    def leakage(self):
        if "leakage" not in self.diagnostics:
            self.diagnostics["leakage"] = boundary_leakage(self.values)
        return self.diagnostics["leakage"]

    @property
    def mass(self):
        return self.l2_space() ** 2

    def l2_space(self):
        return float(math.sqrt(self.grid.cell_volume * np.sum(np.abs(self.values) ** 2)))

    def hat_energy(self):
        """``|u_hat|^2 dV_xi`` under the unitary convention."""
        if self._hat is None:
            F = np.fft.fftn(self.values)
            d = self.grid.ndim
            dV = self.grid.cell_volume
            dxi = float(np.prod([2 * np.pi / (n * h) for n, h in
                                 zip(self.grid.points, self.grid.spacing)]))
            self._hat = np.abs(F) ** 2 * (dV * (2 * np.pi) ** (-d / 2)) ** 2 * dxi
        return self._hat

    def l2_freq(self):
        return float(math.sqrt(np.sum(self.hat_energy())))

    def xi_squared(self):
        if self._w2 is None:
            freqs = self.grid.frequencies()
            w = np.zeros(self.grid.shape)
            for i, k in enumerate(freqs):
                sh = [1] * self.grid.ndim
                sh[i] = k.size
                w = w + k.reshape(sh) ** 2
            self._w2 = w
        return self._w2


def sobolev_norm(field, s, check=True):
    """``||u||_(s)`` with weight ``(1 + |xi|^2)^s`` over the full frequency lattice."""
    if check and field.leakage > field.leak_tol:
        raise ResolutionError(
            f"leakage {field.leakage:.3g} above {field.leak_tol:g}; refusing the norm")
    if not np.any(field.values):
        return 0.0
    if s == 0:
        return field.l2_space()
    e = field.hat_energy()
    return float(math.sqrt(np.sum(e * (1.0 + field.xi_squared()) ** s)))


@dataclass
class Ratio:
    value: float
    infinite: bool = False


def solvability_ratio(norm_u_minusN, norm_Pu_nu, norm_u_minusNn):
    if min(norm_u_minusN, norm_Pu_nu, norm_u_minusNn) < 0:
        raise ValueError("norms must be non-negative")
    den = norm_Pu_nu + norm_u_minusNn
    if den == 0.0 or not math.isfinite(norm_u_minusN / den if den else math.inf):
        if norm_u_minusN == 0.0:
            raise NumericalError("undefined ratio: all norms vanish")
        return Ratio(math.inf, True)
    return Ratio(norm_u_minusN / den)


# --------------------------------------------------------------------------
# operator application


def _fibre(dims):
    return ("tau",) + dims.xi + dims.eta


def polynomial_split(op):
    """Check that ``P*`` is a differential operator we can apply exactly.

    ``f`` must be polynomial of degree <= 2 in xi and the other fields must
    not depend on the fibre.  Raises ``ExactUnavailable`` otherwise.
    """
    d = op.dims
    fib = set(_fibre(d))
    for s in list(op.A) + [b for row in op.B for b in row] + [op.R0]:
        if free_vars(s.expr) & fib:
            raise ExactUnavailable(f"{s.name} depends on the fibre variables")
    if op.R:
        raise ExactUnavailable("lower-order R_j terms act in the amplitude frame")
    e = op.f.expr
    for a in d.xi:
        for b in d.xi:
            for c in d.xi:
                if not is_zero(diff_expr(diff_expr(diff_expr(e, a), b), c)):
                    raise ExactUnavailable("f is not polynomial of degree <= 2 in xi")


def _env(parts, dims):
    t = parts["t"]
    x = parts["x"]
    ex = (slice(None),) + (None,) * (dims.n_x + dims.n_y)
    env = {"t": t[ex]}
    for j, name in enumerate(dims.x):
        env[name] = x[..., j]
    return env


def _y_env(env, dims, y_axes):
    n_x, n_y = dims.n_x, dims.n_y
    for j, name in enumerate(dims.y):
        sh = [1] * (1 + n_x + n_y)
        sh[1 + n_x + j] = y_axes[j].size
        env[name] = y_axes[j].reshape(sh)
    return env


def _bcast(v, shape):
    return np.broadcast_to(np.asarray(v), shape)


def _residual_chunk(op, qm, parts, y_axes, order, exact):
    d = op.dims
    lam = qm.lam
    a = parts["a"]
    shape = a.shape
    env = _y_env(_env(parts, d), d, y_axes)
    wx = parts["omega_x"]
    wt = parts["omega_t"]
    fenv = dict(env)
    for j, name in enumerate(d.xi):
        fenv[name] = wx[..., j]
    if exact:
        zenv = dict(env)
        for name in d.xi:
            zenv[name] = 0.0
        f_val = _bcast(op.f.evaluate(zenv), shape).astype(complex)
        grad = []
        for j, nj in enumerate(d.xi):
            g1 = _bcast(op.f.evaluate(zenv, {nj: 1}), shape)
            f_val = f_val + g1 * wx[..., j]
            grad.append(g1.astype(complex))
        H = {}
        for j, nj in enumerate(d.xi):
            for k, nk in enumerate(d.xi):
                orders = {nj: 2} if j == k else {nj: 1, nk: 1}
                H[(j, k)] = _bcast(op.f.evaluate(zenv, orders), shape)
        for j in range(d.n_x):
            for k in range(d.n_x):
                f_val = f_val + 0.5 * H[(j, k)] * wx[..., j] * wx[..., k]
                grad[j] = grad[j] + H[(j, k)] * wx[..., k]
    else:
        f_val = _bcast(op.f.evaluate(fenv), shape)
        grad = [_bcast(op.f.evaluate(fenv, {nj: 1}), shape) for nj in d.xi]
        H = {}
        if order >= 2:
            for j, nj in enumerate(d.xi):
                for k, nk in enumerate(d.xi):
                    orders = {nj: 2} if j == k else {nj: 1, nk: 1}
                    H[(j, k)] = _bcast(op.f.evaluate(fenv, orders), shape)
    out = lam * (wt + 1j * f_val) * a
    if order >= 1 or exact:
        out = out - 1j * parts["a_t"]
        for j in range(d.n_x):
            out = out + grad[j] * parts["a_x"][j]
        senv = dict(fenv)
        senv["tau"] = wt
        for j, s in enumerate(op.A):
            e1 = tuple(int(i == j) for i in range(d.n_y))
            out = out - 1j * _bcast(s.evaluate(senv), shape) * parts["a_y"][e1]
        out = out + _bcast(op.R0.evaluate(senv), shape) * a
        for j in range(d.n_y):
            for k in range(d.n_y):
                mu = [0] * d.n_y
                mu[j] += 1
                mu[k] += 1
                out = out - _bcast(op.B[j][k].evaluate(senv), shape) * parts["a_y"][tuple(mu)]
        if not exact:
            for term in op.R:
                out = out + lam ** (-term.j) * _bcast(term.coef.evaluate(env), shape) * \
                    _lower_order(term, parts, d)
    if order >= 2 or exact:
        ex = (slice(None),) + (None,) * (d.n_x + d.n_y)
        hess_w = qm.sol.phase_hessian(parts["t"][ex], parts["x"])
        for j in range(d.n_x):
            for k in range(d.n_x):
                jj, kk = min(j, k), max(j, k)
                out = out + 0.5 * H[(j, k)] * (hess_w[..., j, k] * a
                                               - 1j / lam * parts["a_xx"][(jj, kk)])
    return parts["phase"] * out


def _lower_order(term, parts, d):
    """Plain ``D`` derivatives of the amplitude for an ``R_j`` term."""
    nx, ny = sum(term.dx), sum(term.dy)
    if term.dt and (nx or ny) or term.dt > 1:
        raise NotImplementedError("mixed t-derivatives in R_j terms are not evaluated")
    if term.dt == 1:
        return -1j * parts["a_t"]
    if nx and ny:
        raise NotImplementedError("mixed x/y derivatives in R_j terms are not evaluated")
    if nx:
        if nx == 1:
            j = term.dx.index(1)
            return -1j * parts["a_x"][j]
        if nx == 2:
            idx = [i for i, m in enumerate(term.dx) for _ in range(m)]
            return -parts["a_xx"][(idx[0], idx[1])]
        raise NotImplementedError("x-derivatives above order 2 in R_j terms")
    if ny:
        if ny > 2:
            raise NotImplementedError("y-derivatives above order 2 in R_j terms")
        return (-1j) ** ny * parts["a_y"][tuple(term.dy)]
    return parts["a"]


def _sweep(op, qm, grid, order, exact, chunk):
    axes = grid.axes
    d = op.dims
    t_ax, x_axes, y_axes = axes[0], axes[1:1 + d.n_x], axes[1 + d.n_x:]
    out = np.empty(grid.shape, dtype=complex)
    for s in range(0, t_ax.size, chunk):
        parts = qm.chunk(t_ax[s:s + chunk], x_axes, y_axes, derivatives=True)
        out[s:s + chunk] = _residual_chunk(op, qm, parts, y_axes, order, exact)
    return NormField(grid, out)


def apply_operator_exact(op, qm, grid, chunk=4):
    """``P* u`` for polynomial symbols; phase derivatives are analytic."""
    polynomial_split(op)
    return _sweep(op, qm, grid, 2, True, chunk)


def residual_via_expansion(op, qm, grid, order=2, chunk=4):
    """Truncated expansion of ``e^{-i lam w} P* e^{i lam w} a`` times the phase.

    ``order`` 0 keeps the eikonal term only; 1 adds the transport terms
    (``D_t``, the xi-gradient of ``f``, ``A``, ``B``, ``R0`` and the ``R_j``
    terms); 2 adds the xi-Hessian terms of ``f``.
    """
    if order not in (0, 1, 2):
        raise ValueError("order must be 0, 1 or 2")
    return _sweep(op, qm, grid, order, False, chunk)
