"""Complex eikonal equation ``d_t w + i f(t, x, d_x w) = 0`` in Taylor form.

The phase is kept as a Taylor polynomial around the moving centre ``x0(t)``::

    w(t, x) = w0 + <x - x0, xi0> + sum_{2<=|a|<=K} w_a (x - x0)^a / a!

and the coefficients are integrated as a quasilinear ODE system obtained by
matching powers of ``z = x - x0(t)``.  Complex frequencies enter ``f`` only
through its finite Taylor expansion around the real point ``xi0(t)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicHermiteSpline

from . import polynomials as P
from .dsl import multi_indices
from .errors import NumericalError, PositivityLost
from .polynomials import MultiIndexTable

log = logging.getLogger(__name__)


class FJet:
    """Compiled partials ``d_x^b d_xi^g f`` for ``|b| + |g| <= order``."""

    def __init__(self, f, dims, order):
        self.dims = dims
        self.order = order
        self.n = dims.n_x
        self.keys = []
        self.fns = []
        self.weights = []
        for bg in multi_indices(2 * self.n, order):
            beta, gamma = bg[:self.n], bg[self.n:]
            orders = {v: k for v, k in zip(dims.x + dims.xi, bg) if k}
            self.keys.append((beta, gamma))
            self.fns.append(f.partial(orders))
            self.weights.append(1.0 / math.prod(math.factorial(k) for k in bg))
        self.f = f

    def __call__(self, t, x0, xi0):
        """Values of all partials; ``t`` shape ``S``, ``x0, xi0`` shape ``S + (n,)``."""
        env = {"t": np.asarray(t, dtype=float)}
        for j in range(self.n):
            env[self.dims.x[j]] = np.asarray(x0[..., j], dtype=float)
            env[self.dims.xi[j]] = np.asarray(xi0[..., j], dtype=float)
        shape = np.shape(t)
        out = {}
        from .dsl import compile_expr, free_vars

        with np.errstate(all="ignore"):
            for key, e in zip(self.keys, self.fns):
                fn = compile_expr(e)
                val = fn({v: env.get(v, 0.0) for v in free_vars(e)})
                out[key] = np.broadcast_to(np.asarray(val, dtype=float), shape)
        return out

    def compose(self, t, x0, xi0, sigma, K, vals=None):
        """Truncated Taylor polynomial in ``z`` of ``f(t, x0 + z, xi0 + sigma(z))``.

        ``sigma`` is a list of ``n`` coefficient arrays without constant terms.
        """
        n = self.n
        if vals is None:
            vals = self(t, x0, xi0)
        shape = np.shape(t)
        zmon = P.table(n, K)
        sig = monomials_of(sigma, min(self.order, K), n, K)
        out = np.zeros(shape + (len(zmon),), dtype=complex)
        for (beta, gamma), w in zip(self.keys, self.weights):
            if sum(beta) + sum(gamma) > K:
                continue
            term = sig[gamma]
            if sum(beta):
                term = shift(term, beta, n, K)
            out = out + (w * vals[(beta, gamma)])[..., None] * term
        return out


def monomials_of(polys, m, n, K):
    return P.monomial_products([np.asarray(p, dtype=complex) for p in polys], m, n, K)


def shift(coef, beta, n, K):
    """Multiply a truncated polynomial by ``z^beta``."""
    tab = P.table(n, K)
    out = np.zeros_like(coef)
    for i, a in enumerate(tab.alphas):
        b = tuple(x + y for x, y in zip(a, beta))
        k = tab.index.get(b)
        if k is not None:
            out[..., k] = coef[..., i]
    return out


@dataclass
class W2Choice:
    w2: np.ndarray
    branch: str
    kappa: float


def choose_w2_init(dfdx, dfdxi, c_target=1.0, kappa_min=1.0, kappa_max=1.0, reg=1e-12):
    """Initial ``w2`` making ``Im w2 > 0`` and (when possible) killing ``x0'(t0)``."""
    a = np.atleast_1d(np.asarray(dfdx, dtype=float))
    b = np.atleast_1d(np.asarray(dfdxi, dtype=float))
    n = a.size
    nb = float(b @ b)
    if nb == 0.0:
        kappa = max(kappa_min, 2.0 * float(a @ a) / c_target)
        return W2Choice(1j * kappa * np.eye(n), "dxi_zero", kappa)
    # symmetric minimum-norm solution of a + R b = 0
    R = -(np.outer(a, b) + np.outer(b, a)) / nb + float(a @ b) * np.outer(b, b) / nb ** 2
    kappa = min(kappa_max, c_target / (2.0 * nb + reg))
    return W2Choice(R + 1j * kappa * np.eye(n), "least_squares", kappa)


class EikonalSystem:
    """Right-hand side of the coefficient ODE for a given ``f`` and order ``K``."""

    def __init__(self, op, K):
        if K < 2:
            raise ValueError("K must be >= 2")
        self.op = op
        self.K = K
        self.n = op.dims.n_x
        self.table = MultiIndexTable(self.n, K, 2)
        self.jet = FJet(op.f, op.dims, K)
        n = self.n
        self.dim = 2 * n + 1 + len(self.table)
        ztab = P.table(n, K)
        self.ztab = ztab
        # map w_a -> sigma_j coefficient at a - e_j, weight 1/(a - e_j)!
        self._sigma_map = []
        for j in range(n):
            rows = []
            for i, a in enumerate(self.table.alphas):
                if a[j] == 0:
                    continue
                b = list(a)
                b[j] -= 1
                b = tuple(b)
                rows.append((i, ztab.index[b], 1.0 / math.prod(math.factorial(k) for k in b)))
            self._sigma_map.append(rows)
        self._w_to_z = np.array([ztab.index[a] for a in self.table.alphas])
        self._next = [[self.table.neighbor(a, k) for k in range(n)] for a in self.table.alphas]
        self._pair2 = {}
        for j in range(n):
            for k in range(n):
                e = [0] * n
                e[j] += 1
                e[k] += 1
                self._pair2[(j, k)] = self.table.index[tuple(e)]

    def unpack(self, y):
        n = self.n
        return (y[..., :n].real, y[..., n:2 * n].real, y[..., 2 * n], y[..., 2 * n + 1:])

    def pack(self, x0, xi0, w0, w):
        return np.concatenate([x0.astype(complex), xi0.astype(complex), w0[..., None], w], axis=-1)

    def w2_matrix(self, w):
        n = self.n
        M = np.empty(w.shape[:-1] + (n, n), dtype=complex)
        for (j, k), i in self._pair2.items():
            M[..., j, k] = w[..., i]
        return M

    def sigma(self, w):
        """Coefficients of ``sigma_j(z) = d_{z_j} sum_a w_a z^a / a!``."""
        out = []
        for rows in self._sigma_map:
            s = np.zeros(w.shape[:-1] + (len(self.ztab),), dtype=complex)
            for i, zi, c in rows:
                s[..., zi] += c * w[..., i]
            out.append(s)
        return out

    def rhs(self, t, y):
        n = self.n
        t = np.asarray(t, dtype=float)
        x0, xi0, w0, w = self.unpack(y)
        sig = self.sigma(w)
        vals = self.jet(t, x0, xi0)
        F = self.jet.compose(t, x0, xi0, sig, self.K, vals)
        zero = self.ztab.index[(0,) * n]
        z0 = (0,) * n
        units = [tuple(int(i == j) for i in range(n)) for j in range(n)]
        a = np.stack([vals[(e, z0)] for e in units], axis=-1)
        b = np.stack([vals[(z0, e)] for e in units], axis=-1)
        W2 = self.w2_matrix(w)
        rhs_x = a + np.einsum("...jk,...k->...j", W2.real, b)
        dx0 = np.linalg.solve(W2.imag, rhs_x[..., None])[..., 0]
        dxi0 = np.einsum("...jk,...k->...j", W2.real, dx0) + np.einsum(
            "...jk,...k->...j", W2.imag, b)
        fval = F[..., zero]
        dw0 = np.einsum("...j,...j->...", dx0, xi0) - 1j * fval
        dw = np.empty_like(w)
        fact = self.table.factorials
        for i, a_ in enumerate(self.table.alphas):
            acc = -1j * fact[i] * F[..., self._w_to_z[i]]
            for k in range(n):
                nb = self._next[i][k]
                if nb is not None:
                    acc = acc + w[..., nb] * dx0[..., k]
            dw[..., i] = acc
        return self.pack(dx0, dxi0, dw0, dw)


@dataclass
class EikonalSolution:
    system: EikonalSystem
    t: np.ndarray
    y: np.ndarray
    dy: np.ndarray
    t0: float
    K: int
    w0_shift: complex = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self._spline = CubicHermiteSpline(self.t, self.y, self.dy, axis=0)

    @property
    def window(self):
        return float(self.t[0]), float(self.t[-1])

    @property
    def table(self):
        return self.system.table

    @property
    def n(self):
        return self.system.n

    def _check(self, t):
        t = np.asarray(t, dtype=float)
        lo, hi = self.window
        span = hi - lo
        if np.any(t < lo - 1e-12 * span) or np.any(t > hi + 1e-12 * span):
            raise ValueError(f"t outside eikonal window [{lo}, {hi}]")
        return np.clip(t, lo, hi)

    def state(self, t):
        return self._spline(self._check(t))

    def coefficients(self, t):
        """``(x0, xi0, w0, w)`` at times ``t`` (dense output)."""
        return self.system.unpack(self.state(t))

    def rates(self, t):
        """Time derivatives of the coefficients from the ODE right-hand side."""
        t = self._check(t)
        return self.system.unpack(self.system.rhs(t, self.state(t)))

    @property
    def x0(self):
        return self.y[:, :self.n].real

    @property
    def xi0(self):
        return self.y[:, self.n:2 * self.n].real

    @property
    def w0(self):
        return self.y[:, 2 * self.n]

    @property
    def w(self):
        return self.y[:, 2 * self.n + 1:]

    def w2(self, t=None):
        w = self.w if t is None else self.coefficients(t)[3]
        return self.system.w2_matrix(w)

    def min_im_w2(self):
        return float(np.min(np.linalg.eigvalsh(self.w2().imag)))

    def eval_phase(self, t, x):
        """Return ``(w, d_t w, d_x w)``; ``x`` carries a trailing axis of length n_x."""
        t = np.asarray(t, dtype=float)
        x = np.asarray(x, dtype=float)
        n, K = self.n, self.K
        x0, xi0, w0, w = self.coefficients(t)
        dx0, dxi0, dw0, dw = self.rates(t)
        z = x - x0
        ztab = P.table(n, K)
        coef = np.zeros(w.shape[:-1] + (len(ztab),), dtype=complex)
        dcoef = np.zeros_like(coef)
        idx = self.system._w_to_z
        coef[..., idx] = w / self.table.factorials
        dcoef[..., idx] = dw / self.table.factorials
        bshape = np.broadcast_shapes(z.shape[:-1], coef.shape[:-1])
        zb = np.broadcast_to(z, bshape + (n,))
        high = P.evaluate(np.broadcast_to(coef, bshape + coef.shape[-1:]), zb, n, K)
        dhigh = P.evaluate(np.broadcast_to(dcoef, bshape + coef.shape[-1:]), zb, n, K)
        sig = np.stack([P.evaluate(np.broadcast_to(s, bshape + s.shape[-1:]), zb, n, K)
                        for s in self.system.sigma(w)], axis=-1)
        omega = w0 + np.sum(z * xi0, axis=-1) + high
        domega_x = xi0 + sig
        domega_t = (dw0 - np.sum(dx0 * xi0, axis=-1) + np.sum(z * dxi0, axis=-1)
                    + dhigh - np.sum(dx0 * sig, axis=-1))
        return omega, domega_t, domega_x


    def phase_hessian(self, t, x):
        """``d_xj d_xk w`` with shape ``(..., n_x, n_x)``."""
        t = np.asarray(t, dtype=float)
        x = np.asarray(x, dtype=float)
        n, K = self.n, self.K
        x0, _, _, w = self.coefficients(t)
        z = x - x0
        ztab = P.table(n, K)
        bshape = np.broadcast_shapes(z.shape[:-1], w.shape[:-1])
        zb = np.broadcast_to(z, bshape + (n,))
        out = np.empty(bshape + (n, n), dtype=complex)
        for j in range(n):
            for k in range(j, n):
                coef = np.zeros(w.shape[:-1] + (len(ztab),), dtype=complex)
                for i, a in enumerate(self.table.alphas):
                    b = list(a)
                    b[j] -= 1
                    b[k] -= 1
                    if min(b) < 0:
                        continue
                    b = tuple(b)
                    coef[..., ztab.index[b]] += w[..., i] / math.prod(
                        math.factorial(m) for m in b)
                v = P.evaluate(np.broadcast_to(coef, bshape + coef.shape[-1:]), zb, n, K)
                out[..., j, k] = v
                out[..., k, j] = v
        return out


def _rk4(system, t0, y0, t_end, h, c_floor, guard):
    n_steps = max(1, int(math.ceil(abs(t_end - t0) / h - 1e-9)))
    step = (t_end - t0) / n_steps
    ts = [t0]
    ys = [y0]
    y = y0
    t = t0
    for s in range(n_steps):
        k1 = system.rhs(t, y)
        k2 = system.rhs(t + step / 2, y + step / 2 * k1)
        k3 = system.rhs(t + step / 2, y + step / 2 * k2)
        k4 = system.rhs(t + step, y + step * k3)
        y = y + step / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        t = t0 + (s + 1) * step
        if not np.all(np.isfinite(y)) or np.max(np.abs(y)) > guard:
            raise NumericalError(f"eikonal coefficients exceed overflow guard at t={t:.6g}")
        eig = float(np.min(np.linalg.eigvalsh(system.w2_matrix(
            y[2 * system.n + 1:]).imag)))
        if eig < c_floor:
            raise PositivityLost(t, eig)
        ts.append(t)
        ys.append(y)
    return np.array(ts), np.array(ys)


def solve_eikonal(op, seed, K, w2_init, window, h=None, c_floor=1e-8, guard=1e12,
                  normalize=True):
    """Integrate the coefficient system forward and backward from ``t0``.

    ``seed`` is ``(t0, x0, xi0)``.  ``w0(t0) = 0`` and ``w_a(t0) = 0`` for
    ``|a| >= 3``.  With ``normalize`` the constant ``w0(t_min)`` at the minimiser
    of ``Im w0`` over the nodes is subtracted (and recorded) so that
    ``min Im w0 = 0``.
    """
    t0, x0, xi0 = seed
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    xi0 = np.atleast_1d(np.asarray(xi0, dtype=float))
    lo, hi = map(float, window)
    if not lo <= t0 <= hi:
        raise ValueError("seed time outside window")
    system = EikonalSystem(op, K)
    n = system.n
    if x0.size != n or xi0.size != n:
        raise ValueError("seed dimension mismatch")
    h = h or 1e-3 * (hi - lo)
    w = np.zeros(len(system.table), dtype=complex)
    W2 = np.asarray(w2_init, dtype=complex).reshape(n, n)
    if float(np.min(np.linalg.eigvalsh(W2.imag))) <= 0:
        raise ValueError("Im w2(t0) must be positive definite")
    for (j, k), i in system._pair2.items():
        w[i] = W2[j, k]
    y0 = system.pack(x0, xi0, np.array(0j), w)
    parts_t, parts_y = [np.array([t0])], [y0[None]]
    if hi > t0:
        tf, yf = _rk4(system, t0, y0, hi, h, c_floor, guard)
        parts_t.append(tf[1:])
        parts_y.append(yf[1:])
    if lo < t0:
        tb, yb = _rk4(system, t0, y0, lo, h, c_floor, guard)
        parts_t.insert(0, tb[1:][::-1])
        parts_y.insert(0, yb[1:][::-1])
    t = np.concatenate(parts_t)
    y = np.concatenate(parts_y)
    shift = 0j
    if normalize:
        i_min = int(np.argmin(y[:, 2 * n].imag))
        shift = complex(y[i_min, 2 * n])
        y[:, 2 * n] -= shift
    dy = system.rhs(t, y)
    meta = {"h": h, "steps": len(t) - 1, "t_min_im_w0": float(t[int(np.argmin(y[:, 2 * n].imag))])}
    return EikonalSolution(system, t, y, dy, float(t0), K, shift, meta)


@dataclass
class EikonalResidual:
    values: np.ndarray
    slope: float
    z_abs: np.ndarray


def eikonal_residual(sol, op, t, x, T_exp=None):
    """``d_t w + i f(t, x, d_x w)`` with ``f`` Taylor-expanded in ``xi`` to order ``T_exp``.

    Returns the residual and the log-log slope of ``|residual|`` against
    ``|x - x0(t)|`` (NaN when the residual is at round-off level).
    """
    T = T_exp if T_exp is not None else sol.K + 1
    if T < sol.K:
        raise ValueError("T_exp must be >= K")
    d = op.dims
    t = np.asarray(t, dtype=float)
    x = np.asarray(x, dtype=float)
    omega, wt, wx = sol.eval_phase(t, x)
    x0, xi0, _, _ = sol.coefficients(t)
    shape = wt.shape
    tb = np.broadcast_to(t, shape)
    xb = np.broadcast_to(x, shape + (d.n_x,))
    xib = np.broadcast_to(xi0, shape + (d.n_x,))
    sig = wx - xib
    env = {"t": tb}
    for j in range(d.n_x):
        env[d.x[j]] = xb[..., j]
        env[d.xi[j]] = xib[..., j]
    fval = np.zeros(shape, dtype=complex)
    scale = np.abs(wt)
    for g in multi_indices(d.n_x, T):
        orders = {d.xi[j]: k for j, k in enumerate(g) if k}
        coef = np.asarray(op.f.evaluate(env, orders), dtype=float)
        if not np.any(coef):
            continue
        term = coef / math.prod(math.factorial(k) for k in g)
        for j, k in enumerate(g):
            if k:
                term = term * sig[..., j] ** k
        fval = fval + term
        scale = scale + np.abs(term)
    res = wt + 1j * fval
    zabs = np.linalg.norm(xb - np.broadcast_to(x0, shape + (d.n_x,)), axis=-1)
    # points at round-off level carry no power information
    mask = (np.abs(res) > 64 * np.finfo(float).eps * scale) & (zabs > 0)
    slope = float("nan")
    if np.count_nonzero(mask) >= 2:
        lz = np.log(zabs[mask])
        if np.ptp(lz) > 0:
            slope = float(np.polyfit(lz, np.log(np.abs(res[mask])), 1)[0])
    return EikonalResidual(res, slope, zabs)
