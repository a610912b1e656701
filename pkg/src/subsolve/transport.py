"""Transport equations for the multi-scale amplitudes.

Amplitudes live in scaled coordinates ``z = rho^2 (x - x0(t))`` and
``Y = rho (y - y0)`` with ``rho = lam^(1/N)``:

    phi = sum_k rho^-k phi_k(t, z, Y),    phi_k = sum_a phi_{k,a}(t, Y) z^a.

After conjugation by the phase the operator acting on ``phi`` is::

    D_t + rho^2 A0 D_z + rho A1 D_Y + rho^2 A2 D_Y^2 + R0 + sum_j rho^(-jN) R_j

with every coefficient Taylor-expanded in ``x - x0(t) = z / rho^2``.  A piece
carrying ``rho^p`` and acting on level ``k'`` is booked at level ``k' - p``
when ``p <= 0``.  For ``p > 0`` the coefficient is small on the chosen
interval (its integral is ``O(rho^-3)``), so it is booked at level
``k' + 3 - p`` with weight ``rho^3``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import cumulative_simpson

from . import polynomials as P
from .dsl import SymbolFn, compile_expr, diff_expr, free_vars, is_zero, multi_indices
from .eikonal import FJet, shift
from .errors import ConfigError, NumericalError

log = logging.getLogger(__name__)

MAX_JET = 8


def spectral_filter(u, hs, frac, first_axis=1):
    """Flat-top low-pass in ``Y``: ``smooth_step(|k| / k_c)`` with ``k_c = frac * k_Nyquist``.

    Modes below ``k_c`` pass unchanged and modes above ``2 k_c`` are removed,
    which is where repeated stencil derivatives amplify round-off.
    ``frac = 0`` is the identity.
    """
    if frac <= 0.0:
        return u
    for j in range(len(hs)):
        ax = first_axis + j
        n = u.shape[ax]
        sig = smooth_step(np.abs(np.fft.fftfreq(n)) * 2.0 / frac)
        shape = [1] * u.ndim
        shape[ax] = n
        u = np.fft.ifft(np.fft.fft(u, axis=ax) * sig.reshape(shape), axis=ax)
    return u


def filter_window(axes, settings):
    """1 where the forcing can be significant, 0 from the escape margin outward."""
    core = (GAUSS_PLATEAU * settings.bump_radius if settings.profile == "gaussian"
            else settings.bump_radius)
    mesh = np.meshgrid(*axes, indexing="ij")
    out = np.ones(mesh[0].shape)
    for ax, m in zip(axes, mesh):
        edge = float(np.max(np.abs(ax))) - settings.margin_cells * float(ax[1] - ax[0])
        if edge <= core:
            continue
        out = out * smooth_step(1.0 + np.clip(np.abs(m) - core, 0.0, None) / (edge - core))
    return out


# --------------------------------------------------------------------------
# profiles


def standard_bump(s):
    """``exp(1 - 1/(1 - s^2))`` on ``|s| < 1``, zero outside; equals 1 at 0."""
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    m = np.abs(s) < 1
    out[m] = np.exp(1.0 - 1.0 / (1.0 - s[m] ** 2))
    return out


def bump_profile(axes, radius):
    """Tensor product of ``standard_bump(Y_j / radius)`` on the Y grid."""
    mesh = np.meshgrid(*axes, indexing="ij")
    out = np.ones(mesh[0].shape)
    for m in mesh:
        out = out * standard_bump(m / radius)
    return out


GAUSS_PLATEAU = 8.6
GAUSS_SUPPORT = 12.0


def gaussian_profile(axes, width):
    """``exp(-|Y|^2 / 2 w^2)`` tapered to zero between ``8.6 w`` and ``12 w``.

    The taper starts below ``1e-16`` so the profile is compactly supported and
    C-infinity while its derivatives stay those of the Gaussian.
    """
    mesh = np.meshgrid(*axes, indexing="ij")
    out = np.ones(mesh[0].shape)
    span = GAUSS_SUPPORT - GAUSS_PLATEAU
    for m in mesh:
        s = np.abs(m) / width
        out = out * np.exp(-0.5 * s ** 2) * smooth_step(np.maximum(1.0, 1.0 + (s - GAUSS_PLATEAU) / span))
    return out


PROFILES = {"bump": bump_profile, "gaussian": gaussian_profile}


def profile_extent(settings):
    """Half-width of the profile support in scaled ``Y``."""
    if settings.profile == "gaussian":
        return GAUSS_SUPPORT * settings.bump_radius
    return settings.bump_radius


def smooth_step(s):
    """C-infinity plateau: 1 on ``|s| <= 1``, 0 on ``|s| >= 2``."""
    s = np.abs(np.asarray(s, dtype=float))
    a = np.clip(2.0 - s, 0.0, None)
    b = np.clip(s - 1.0, 0.0, None)
    with np.errstate(divide="ignore", over="ignore"):
        ga = np.where(a > 0, np.exp(-1.0 / np.where(a > 0, a, 1.0)), 0.0)
        gb = np.where(b > 0, np.exp(-1.0 / np.where(b > 0, b, 1.0)), 0.0)
    return ga / (ga + gb)


def smooth_step_derivative(s):
    """Exact derivative of :func:`smooth_step`."""
    s = np.asarray(s, dtype=float)
    u = np.abs(s)
    a = np.clip(2.0 - u, 0.0, None)
    b = np.clip(u - 1.0, 0.0, None)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        ga = np.where(a > 0, np.exp(-1.0 / np.where(a > 0, a, 1.0)), 0.0)
        gb = np.where(b > 0, np.exp(-1.0 / np.where(b > 0, b, 1.0)), 0.0)
        dga = np.where(a > 0, ga / np.where(a > 0, a, 1.0) ** 2, 0.0)
        dgb = np.where(b > 0, gb / np.where(b > 0, b, 1.0) ** 2, 0.0)
        d = -(dga * gb + ga * dgb) / (ga + gb) ** 2
    return np.where((a > 0) & (b > 0), d * np.sign(s), 0.0)


def _profile_derivative_bounds(jmax=4, samples=20001):
    s = np.linspace(-2.2, 2.2, samples)
    v = smooth_step(s)
    out = []
    for _ in range(jmax + 1):
        out.append(float(np.max(np.abs(v))))
        v = np.gradient(v, s)
    return out


_PSI_BOUNDS = None


@dataclass
class Cutoff:
    """``chi(t) = psi((t - mid) / rad)``, identically 1 on ``[mid - rad, mid + rad]``."""

    mid: float
    rad: float
    window: tuple
    warning: str = ""

    @property
    def support(self):
        lo = max(self.window[0], self.mid - 2 * self.rad)
        hi = min(self.window[1], self.mid + 2 * self.rad)
        return lo, hi

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        if self.rad == math.inf:
            return np.ones_like(t)
        return smooth_step((t - self.mid) / self.rad)

    def derivative(self, t):
        t = np.asarray(t, dtype=float)
        if self.rad == math.inf:
            return np.zeros_like(t)
        return smooth_step_derivative((t - self.mid) / self.rad) / self.rad

    def derivative_bounds(self):
        """``sup |chi^(j)| * rad^j`` for ``j <= 4`` (profile constants)."""
        global _PSI_BOUNDS
        if _PSI_BOUNDS is None:
            _PSI_BOUNDS = _profile_derivative_bounds()
        return list(_PSI_BOUNDS)

    def sup_derivative(self, j):
        if self.rad == math.inf:
            return 0.0 if j else 1.0
        return self.derivative_bounds()[j] / self.rad ** j


def build_cutoff_chi(I0, window, rho=None, N=None):
    """Cutoff equal to 1 on ``I0`` with support in twice ``I0`` about its midpoint.

    When twice ``I0`` leaves the window the support is clipped and a warning
    is recorded; if ``I0`` is the whole window ``chi`` is 1 on it.
    """
    lo, hi = map(float, I0)
    wlo, whi = map(float, window)
    if lo < wlo or hi > whi or hi <= lo:
        raise ValueError("I0 must be a non-empty interval inside the window")
    mid, rad = 0.5 * (lo + hi), 0.5 * (hi - lo)
    warning = ""
    if mid - 2 * rad < wlo or mid + 2 * rad > whi:
        warning = "support of chi clipped to the eikonal window"
        log.warning(warning)
    if lo <= wlo and hi >= whi:
        return Cutoff(mid, math.inf, (wlo, whi), "I0 equals the window; chi = 1")
    return Cutoff(mid, rad, (wlo, whi), warning)


# --------------------------------------------------------------------------
# finite differences on the Y grid (compact support, zero padding)


def _shift(u, k, axis):
    out = np.zeros_like(u)
    n = u.shape[axis]
    src = [slice(None)] * u.ndim
    dst = [slice(None)] * u.ndim
    if k > 0:
        src[axis], dst[axis] = slice(k, n), slice(0, n - k)
    else:
        src[axis], dst[axis] = slice(0, n + k), slice(-k, n)
    out[tuple(dst)] = u[tuple(src)]
    return out


def d1(u, axis, h):
    """Fourth-order centred first derivative."""
    return (-_shift(u, 2, axis) + 8 * _shift(u, 1, axis) - 8 * _shift(u, -1, axis)
            + _shift(u, -2, axis)) / (12 * h)


def d2(u, axis, h):
    """Fourth-order centred second derivative."""
    return (-_shift(u, 2, axis) + 16 * _shift(u, 1, axis) - 30 * u + 16 * _shift(u, -1, axis)
            - _shift(u, -2, axis)) / (12 * h * h)


def DY(u, mu, hs, first_axis=1):
    """``D_Y^mu u = (-i d_Y)^mu u`` with axes starting at ``first_axis``."""
    out = u
    for j, m in enumerate(mu):
        ax = first_axis + j
        while m >= 2:
            out = -d2(out, ax, hs[j])
            m -= 2
        if m == 1:
            out = -1j * d1(out, ax, hs[j])
    return out


# --------------------------------------------------------------------------
# coefficient expansion


@dataclass
class TransportSettings:
    K_amp: int = 2
    M_x: int = 4
    T_f: int = 2
    N: int = 12
    y_half_width: float = 1.0
    y_points: int = 128
    bump_radius: float = 0.25
    profile: str = "bump"
    t_points: int = 401
    margin_cells: int = 10
    escape_tol: float = 1e-10
    y_filter: float = 0.0

    def validate(self):
        if self.N < 10:
            raise ConfigError(f"N = {self.N} < 10; the level bookkeeping needs N >= 10")
        if self.M_x > MAX_JET or self.T_f > MAX_JET:
            raise ConfigError(f"expansion orders exceed the jet order {MAX_JET}")
        if self.profile not in PROFILES:
            raise ConfigError(f"unknown profile {self.profile!r}; choose from {sorted(PROFILES)}")
        if self.K_amp < 0 or self.M_x < 0 or self.T_f < 0:
            raise ConfigError("orders must be non-negative")
        if not 0.0 <= self.y_filter <= 0.5:
            raise ConfigError("y_filter is a fraction of the Y Nyquist frequency in [0, 0.5]")


@dataclass
class Piece:
    """``coef(t, Y) z^beta D_z^gamma D_Y^mu`` with raw power ``rho^p``."""

    source: str
    p: int
    beta: tuple
    gamma: tuple
    mu: tuple
    coef: np.ndarray  # shape (nt_fine, *Y) or broadcastable

    @property
    def shift(self):
        return 3 - self.p if self.p > 0 else -self.p

    @property
    def degree_change(self):
        return sum(self.beta) - sum(self.gamma)


@dataclass
class CoefficientSet:
    t_fine: np.ndarray
    Y_axes: tuple
    rho: float
    N: int
    M_x: int
    T_f: int
    pieces: list
    R00: np.ndarray
    A0_raw: np.ndarray  # (nt_fine, n_x) values of A0 at z = 0
    expansions: dict = field(default_factory=dict)

    def weight(self, piece):
        return self.rho ** 3 if piece.p > 0 else 1.0


def _retruncate(coef, n, K_from, K_to):
    src = P.table(n, K_from)
    dst = P.table(n, K_to)
    out = np.zeros(coef.shape[:-1] + (len(dst),), dtype=coef.dtype)
    for i, a in enumerate(src.alphas):
        j = dst.index.get(a)
        if j is not None:
            out[..., j] = coef[..., i]
    return out


def _eval_expr(e, env, shape):
    with np.errstate(all="ignore"):
        val = compile_expr(e)({v: env[v] for v in free_vars(e)})
    val = np.asarray(val)
    if not np.all(np.isfinite(val)):
        raise NumericalError("non-finite symbol coefficient in the transport expansion")
    return val


def compose_symbol(sym, dims, env, sig_mon, dtau_pows, M, T_f, shape):
    """Taylor polynomial in ``x - x0`` of ``sym(t, x0 + z, y, dtau, xi0 + sigma, 0)``.

    ``env`` holds real base values (``t, x*, xi*, y*`` with ``tau = eta = 0``);
    ``sig_mon[g]`` are products of sigma components, ``dtau_pows[l]`` powers of
    ``dtau``.  Returns coefficients of shape ``shape + (M_z,)``.
    """
    n = dims.n_x
    Mz = len(P.table(n, M))
    out = np.zeros(tuple(shape) + (Mz,), dtype=complex)
    expr = sym.expr if isinstance(sym, SymbolFn) else sym
    if is_zero(expr):
        return out
    has_tau = "tau" in free_vars(expr)
    for bg in multi_indices(2 * n, M):
        beta, gamma = bg[:n], bg[n:]
        e = expr
        for v, k in zip(dims.x + dims.xi, bg):
            for _ in range(k):
                e = diff_expr(e, v)
        fact = math.prod(math.factorial(k) for k in bg)
        for ell in range(T_f + 1 if has_tau else 1):
            if ell:
                e = diff_expr(e, "tau")
            if is_zero(e):
                break
            val = _eval_expr(e, env, shape) / (fact * math.factorial(ell))
            mon = shift(sig_mon[gamma], beta, n, M) if sum(beta) else sig_mon[gamma]
            if ell:
                mon = P.pmul(mon, dtau_pows[ell], n, M)
            mon = mon.reshape(mon.shape[:1] + (1,) * (len(shape) - 1) + mon.shape[1:])
            out = out + np.asarray(val)[..., None] * mon
    return out


def expand_coefficients(op, sol, rho, settings, t_fine, y0=None):
    """Expand ``A0, A1, A2, R0`` (and ``R_j`` coefficients) along the trajectory.

    ``t_fine`` contains transport nodes and RK4 midpoints.  Returns the list of
    operator pieces with their raw powers of ``rho``.
    """
    settings.validate()
    d = op.dims
    n, M, T_f, N = d.n_x, settings.M_x, settings.T_f, settings.N
    y0 = np.zeros(d.n_y) if y0 is None else np.asarray(y0, dtype=float)
    lo, hi = sol.window
    if t_fine.min() < lo - 1e-12 or t_fine.max() > hi + 1e-12:
        raise ValueError("transport interval leaves the eikonal window")
    nt = t_fine.size
    Y_axes = tuple(np.linspace(-settings.y_half_width, settings.y_half_width, settings.y_points)
                   for _ in range(d.n_y))
    Yshape = tuple(a.size for a in Y_axes)
    shape = (nt,) + Yshape
    x0, xi0, w0, w = sol.coefficients(t_fine)
    dx0 = sol.rates(t_fine)[0]
    K = sol.K
    sig = [_retruncate(s, n, K, M) for s in sol.system.sigma(w)]
    sig_mon = P.monomial_products(sig, M, n, M)
    F = FJet(op.f, d, M).compose(t_fine, x0, xi0, sig, M)
    dtau = -1j * F
    dtau_pows = P.powers(dtau, T_f, n, M)
    Ymesh = np.meshgrid(*Y_axes, indexing="ij")
    pad = (slice(None),) + (None,) * d.n_y
    env = {"t": t_fine[pad], "tau": np.zeros((1,) * len(shape))}
    for j in range(n):
        env[d.x[j]] = x0[:, j][pad]
        env[d.xi[j]] = xi0[:, j][pad]
    for j in range(d.n_y):
        env[d.y[j]] = (y0[j] + Ymesh[j] / rho)[None]
        env[d.eta[j]] = np.zeros((1,) * len(shape))
    ztab = P.table(n, M)
    pieces = []
    expansions = {}

    def add_pieces(src, coef_poly, p_of_beta, gamma, mu):
        for i, beta in enumerate(ztab.alphas):
            c = coef_poly[..., i]
            if not np.any(c):
                continue
            pieces.append(Piece(src, p_of_beta(sum(beta)), beta, gamma, mu, c))

    # A0 = i d_xi f(t, x, xi0 + sigma) - x0'
    A0_raw = np.zeros((nt, n), dtype=complex)
    for j in range(n):
        dfj = SymbolFn(diff_expr(op.f.expr, d.xi[j]), d.variables, real=True)
        poly = 1j * FJet(dfj, d, M).compose(t_fine, x0, xi0, sig, M)
        poly[..., 0] -= dx0[:, j]
        A0_raw[:, j] = poly[..., 0]
        expansions[f"A0_{j + 1}"] = poly
        e = tuple(int(i == j) for i in range(n))
        add_pieces(f"A0_{j + 1}", poly.reshape((nt,) + (1,) * d.n_y + poly.shape[-1:]),
                   lambda b: 2 - 2 * b, e, (0,) * d.n_y)
    for j, a in enumerate(op.A):
        poly = compose_symbol(a, d, env, sig_mon, dtau_pows, M, T_f, shape)
        expansions[f"A1_{j + 1}"] = poly
        mu = tuple(int(i == j) for i in range(d.n_y))
        add_pieces(f"A1_{j + 1}", poly, lambda b: 1 - 2 * b, (0,) * n, mu)
    for j, row in enumerate(op.B):
        for k, b in enumerate(row):
            poly = compose_symbol(b, d, env, sig_mon, dtau_pows, M, T_f, shape)
            expansions[f"A2_{j + 1}{k + 1}"] = poly
            mu = [0] * d.n_y
            mu[j] += 1
            mu[k] += 1
            add_pieces(f"A2_{j + 1}{k + 1}", poly, lambda b_: 2 - 2 * b_, (0,) * n, tuple(mu))
    R0 = compose_symbol(op.R0, d, env, sig_mon, dtau_pows, M, T_f, shape)
    expansions["R0"] = R0
    R00 = np.broadcast_to(R0[..., 0], shape).copy()
    for i, beta in enumerate(ztab.alphas):
        if sum(beta) and np.any(R0[..., i]):
            pieces.append(Piece("R0", -2 * sum(beta), beta, (0,) * n, (0,) * d.n_y, R0[..., i]))
    for r in op.R:
        if r.dt:
            raise ConfigError("R_j terms with D_t are not supported by the transport solver")
        # real Taylor expansion of coef(t, x, y) in x - x0
        poly = np.zeros(shape + (len(ztab),), dtype=complex)
        for i, beta in enumerate(ztab.alphas):
            e = r.coef.expr
            for v, k in zip(d.x, beta):
                for _ in range(k):
                    e = diff_expr(e, v)
            if is_zero(e):
                continue
            poly[..., i] = _eval_expr(e, env, shape) / math.prod(math.factorial(k) for k in beta)
        expansions[f"R{r.j}"] = poly
        add_pieces(f"R{r.j}", poly,
                   lambda b, r=r: -r.j * N - 2 * b + 2 * sum(r.dx) + sum(r.dy), r.dx, r.dy)
    return CoefficientSet(t_fine, Y_axes, rho, N, M, T_f, pieces, R00, A0_raw, expansions)


# --------------------------------------------------------------------------
# solving the hierarchy


def transport_grid(support, t0, points):
    """Nodes on ``support`` containing ``t0`` plus the interleaved fine grid.

    Returns ``(nodes, fine, i0)`` where ``fine[2*i] == nodes[i]`` and odd
    entries are midpoints.
    """
    lo, hi = map(float, support)
    if not lo <= t0 <= hi:
        raise ValueError("anchor outside the transport support")
    span = hi - lo
    nl = max(2, int(round((points - 1) * (t0 - lo) / span)) + 1) if t0 > lo else 1
    nr = max(2, points - nl + 1) if hi > t0 else 1
    left = np.linspace(lo, t0, nl)
    right = np.linspace(t0, hi, nr)
    nodes = np.concatenate([left, right[1:]])
    fine = np.empty(2 * nodes.size - 1)
    fine[0::2] = nodes
    fine[1::2] = 0.5 * (nodes[1:] + nodes[:-1])
    return nodes, fine, nl - 1


@dataclass
class AmplitudeHierarchy:
    t: np.ndarray
    Y_axes: tuple
    phi: dict
    dphi_dt: dict
    rho: float
    N: int
    t0: float
    i0: int
    y0: np.ndarray
    settings: TransportSettings
    n_x: int
    chi: Cutoff | None = None
    certificate: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    @property
    def K_amp(self):
        return self.settings.K_amp

    def level(self, k):
        return {a: v for (kk, a), v in self.phi.items() if kk == k}

    def sup_norms(self):
        out = {}
        for (k, a), v in self.phi.items():
            out[k] = max(out.get(k, 0.0), float(np.max(np.abs(v))))
        return out

    def summary(self):
        return {
            "rho": self.rho, "N": self.N, "t0": self.t0, "K_amp": self.K_amp,
            "M_x": self.settings.M_x, "t_range": [float(self.t[0]), float(self.t[-1])],
            "sup_norms": {str(k): v for k, v in self.sup_norms().items()},
            "certificate": {str(k): v for k, v in self.certificate.items()},
            "diagnostics": self.diagnostics,
        }


def _apply_piece(piece, coef, phi_level, j_out, out_index, hs, weight, n_x):
    """Contribution of ``piece`` acting on one level, restricted to degree ``j_out``."""
    contrib = {}
    for delta, val in phi_level.items():
        if any(d < g for d, g in zip(delta, piece.gamma)):
            continue
        alpha = tuple(d - g + b for d, g, b in zip(delta, piece.gamma, piece.beta))
        if sum(alpha) != j_out or alpha not in out_index:
            continue
        fac = (-1j) ** sum(piece.gamma) * math.prod(
            math.factorial(d) // math.factorial(d - g) for d, g in zip(delta, piece.gamma))
        term = DY(val, piece.mu, hs) if any(piece.mu) else val
        contrib[alpha] = contrib.get(alpha, 0) + weight * fac * coef * term
    return contrib


def _homogeneous_matrix(coeffs, pieces, alphas, shape_fine):
    """``S0 + R00 * id`` on the degree block ``alphas`` at fine times."""
    m = len(alphas)
    idx = {a: i for i, a in enumerate(alphas)}
    Mm = np.zeros(shape_fine + (m, m), dtype=complex)
    for i in range(m):
        Mm[..., i, i] += coeffs.R00
    for pc in pieces:
        for jcol, delta in enumerate(alphas):
            if any(d < g for d, g in zip(delta, pc.gamma)):
                continue
            alpha = tuple(d - g + b for d, g, b in zip(delta, pc.gamma, pc.beta))
            irow = idx.get(alpha)
            if irow is None:
                continue
            fac = (-1j) ** sum(pc.gamma) * math.prod(
                math.factorial(d) // math.factorial(d - g) for d, g in zip(delta, pc.gamma))
            Mm[..., irow, jcol] += fac * np.broadcast_to(pc.coef, shape_fine)
    return Mm


def _fundamental(Mm, t_fine, i0):
    """RK4 for ``dE/dt = -i M E`` with ``E(t0) = id`` on the node grid."""
    nt = (t_fine.size + 1) // 2
    m = Mm.shape[-1]
    E = np.empty((nt,) + Mm.shape[1:], dtype=complex)
    eye = np.broadcast_to(np.eye(m, dtype=complex), Mm.shape[1:])
    E[i0] = eye

    def f(Mi, X):
        return -1j * np.einsum("...ij,...jk->...ik", Mi, X)

    for direction in (1, -1):
        X = eye.copy()
        i = i0
        while 0 <= i + direction < nt:
            a, b = 2 * i, 2 * (i + direction)
            h = t_fine[b] - t_fine[a]
            mid = Mm[(a + b) // 2]
            k1 = f(Mm[a], X)
            k2 = f(mid, X + 0.5 * h * k1)
            k3 = f(mid, X + 0.5 * h * k2)
            k4 = f(Mm[b], X + h * k3)
            X = X + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            i += direction
            E[i] = X
    return E


def _cumquad_from(q, t, i0):
    """Cumulative integral of ``q`` along axis 0 starting at node ``i0`` (Simpson)."""
    out = np.zeros_like(q)
    if i0 + 1 < t.size:
        out[i0:] = _cumulative(q[i0:], t[i0:])
    if i0 > 0:
        out[:i0 + 1] = -_cumulative(q[:i0 + 1][::-1], -t[:i0 + 1][::-1])[::-1]
    return out


def _cumulative(q, t):
    if t.size < 3:
        h = np.diff(t).reshape((-1,) + (1,) * (q.ndim - 1))
        return np.concatenate([np.zeros_like(q[:1]), np.cumsum(0.5 * h * (q[:-1] + q[1:]), 0)])
    # scipy drops imaginary parts here, so integrate the parts separately
    return (cumulative_simpson(q.real, x=t, axis=0, initial=0)
            + 1j * cumulative_simpson(q.imag, x=t, axis=0, initial=0))


def solve_transport(coeffs, bump, settings, i0, t0=None, y0=None, chi=None):
    """Solve levels ``k = 0..K_amp`` and x-orders ``0..M_x`` (global sweep k, then j).

    Level 0, order 0 starts from ``bump``; every other block starts from zero at
    ``t0``.  Forcing comes from lower levels and lower x-orders.
    """
    settings.validate()
    tf = coeffs.t_fine
    t = tf[0::2]
    n_x = len(coeffs.A0_raw[0])
    Y_axes = coeffs.Y_axes
    hs = [float(a[1] - a[0]) for a in Y_axes]
    Yshape = tuple(a.size for a in Y_axes)
    bump = np.asarray(bump, dtype=complex)
    if bump.shape != Yshape:
        raise ValueError("bump must be sampled on the Y grid")
    shape_fine = (tf.size,) + Yshape
    hom, force = [], []
    for pc in coeffs.pieces:
        if pc.shift == 0 and pc.degree_change == 0 and not any(pc.mu):
            hom.append(pc)
        elif pc.shift == 0 and pc.degree_change <= 0:
            raise NumericalError(f"unsupported same-level piece from {pc.source}")
        else:
            force.append(pc)
    phi, dphi = {}, {}
    dropped = {}
    window = filter_window(Y_axes, settings) if settings.y_filter > 0.0 else None
    K, M = settings.K_amp, settings.M_x
    for k in range(K + 1):
        for j in range(M + 1):
            alphas = [a for a in multi_indices(n_x, j, j)]
            index = {a: i for i, a in enumerate(alphas)}
            G = np.zeros((t.size,) + Yshape + (len(alphas),), dtype=complex)
            for pc in force:
                kp = k - pc.shift
                if kp < 0:
                    continue
                level = {a: v for (kk, a), v in phi.items() if kk == kp}
                coef = np.broadcast_to(pc.coef, shape_fine)[0::2]
                c = _apply_piece(pc, coef, level, j, index, hs, coeffs.weight(pc), n_x)
                for a, v in c.items():
                    G[..., index[a]] -= v
            if settings.y_filter > 0.0 and (k, j) != (0, 0):
                G = spectral_filter(G, hs, settings.y_filter) * window[None, ..., None]
            Mm = _homogeneous_matrix(coeffs, hom, alphas, shape_fine)
            E = _fundamental(Mm, tf, i0)
            Einv = np.linalg.inv(E)
            phi0 = np.zeros(Yshape + (len(alphas),), dtype=complex)
            if k == 0 and j == 0:
                phi0[..., 0] = bump
            q = 1j * np.einsum("...ij,...j->...i", Einv, G)
            Psi = _cumquad_from(q, t, i0) + phi0[None]
            Phi = np.einsum("...ij,...j->...i", E, Psi)
            dPhi = 1j * (G - np.einsum("...ij,...j->...i", Mm[0::2], Phi))
            for a, i in index.items():
                phi[(k, a)] = Phi[..., i]
                dphi[(k, a)] = dPhi[..., i]
    # magnitude of pieces that would land above K_amp (dropped by truncation)
    for pc in force:
        for kp in range(K + 1):
            lev = kp + pc.shift
            if lev <= K:
                continue
            level = {a: v for (kk, a), v in phi.items() if kk == kp}
            coef = np.broadcast_to(pc.coef, shape_fine)[0::2]
            for j in range(M + 1 + max(0, pc.degree_change)):
                alphas = multi_indices(n_x, j, j)
                c = _apply_piece(pc, coef, level, j, set(alphas), hs, coeffs.weight(pc), n_x)
                for v in c.values():
                    mag = float(np.max(np.abs(v))) * coeffs.rho ** (-lev)
                    dropped[lev] = max(dropped.get(lev, 0.0), mag)
    amp = AmplitudeHierarchy(t, Y_axes, phi, dphi, coeffs.rho, coeffs.N,
                             float(t[i0] if t0 is None else t0), i0,
                             np.zeros(len(Y_axes)) if y0 is None else np.asarray(y0),
                             settings, n_x, chi)
    amp.diagnostics["dropped_sup"] = {str(k): v for k, v in sorted(dropped.items())}
    _check_support(amp)
    amp.certificate = s3_certificate(amp)
    return amp


def _check_support(amp):
    m = amp.settings.margin_cells
    for key, v in amp.phi.items():
        sup = float(np.max(np.abs(v)))
        if sup == 0.0:
            continue
        for ax in range(1, v.ndim):
            edge = np.concatenate([np.take(v, np.arange(m), axis=ax).ravel(),
                                   np.take(v, np.arange(v.shape[ax] - m, v.shape[ax]),
                                           axis=ax).ravel()])
            if np.max(np.abs(edge)) > amp.settings.escape_tol * sup:
                raise NumericalError(
                    f"support escape: amplitude {key} reaches the Y-box margin")


def s3_certificate(amp):
    """``C_k = sup |d_t phi_k| / (rho^3 sup |phi_k|)`` by finite differences in t."""
    out = {}
    for k in range(1, amp.K_amp + 1):
        lev = amp.level(k)
        sup = max((float(np.max(np.abs(v))) for v in lev.values()), default=0.0)
        if sup == 0.0:
            out[k] = 0.0
            continue
        dsup = max(float(np.max(np.abs(np.gradient(v, amp.t, axis=0)))) for v in lev.values())
        out[k] = dsup / (amp.rho ** 3 * sup)
    return out


def build_amplitudes(op, sol, rho, settings, support, chi=None, y0=None, bump=None):
    """Grid, coefficient expansion and hierarchy solve on ``support``."""
    nodes, fine, i0 = transport_grid(support, sol.t0, settings.t_points)
    coeffs = expand_coefficients(op, sol, rho, settings, fine, y0)
    if bump is None:
        bump = PROFILES[settings.profile](coeffs.Y_axes, settings.bump_radius)
    return solve_transport(coeffs, bump, settings, i0, sol.t0, y0, chi), coeffs
