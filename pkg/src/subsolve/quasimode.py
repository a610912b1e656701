"""Assembly of the approximate solution and its evaluation on grids.

    u(t, x, y) = lam^((n-1) d / 2) chi(t) psi(x - x0(t)) e^{i lam w(t, x)}
                 * sum_k rho^-k phi_k(t, rho^2 (x - x0(t)), rho (y - y0))

with ``d = 3/N`` and ``rho = lam^(1/N)``.  The amplitudes are stored on the
transport grid (unscaled ``t``, scaled ``Y``) and interpolated with cubic
splines; ``psi`` is a radial cutoff placed where the Gaussian factor of the
phase is already below ``1e-14``.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from . import polynomials as P
from .errors import ResolutionError
from .transport import DY, smooth_step

log = logging.getLogger(__name__)

LOG_CUT = math.log(1e14)


@dataclass
class Grid:
    """Periodic tensor grid; axes ordered ``t, x1.., y1..``."""

    centers: tuple
    half_widths: tuple
    points: tuple
    names: tuple = ()

    def __post_init__(self):
        for p in self.points:
            if p < 2 or p & (p - 1):
                raise ValueError(f"grid points per axis must be powers of two, got {p}")
        if not self.names:
            object.__setattr__(self, "names", tuple(f"axis{i}" for i in range(len(self.points))))

    @property
    def ndim(self):
        return len(self.points)

    @property
    def spacing(self):
        return tuple(2 * L / n for L, n in zip(self.half_widths, self.points))

    @property
    def axes(self):
        return tuple(c - L + h * np.arange(n) for c, L, h, n in
                     zip(self.centers, self.half_widths, self.spacing, self.points))

    @property
    def shape(self):
        return tuple(self.points)

    @property
    def cell_volume(self):
        return float(np.prod(self.spacing))

    def frequencies(self):
        """Angular frequency lattices ``2 pi k / (2 L)`` per axis (FFT order)."""
        return tuple(2 * np.pi * np.fft.fftfreq(n, d=h) for n, h in zip(self.points, self.spacing))

    def max_frequency(self):
        return tuple(np.pi / h for h in self.spacing)

    def refined(self):
        return Grid(self.centers, self.half_widths, tuple(2 * p for p in self.points), self.names)

    def to_dict(self):
        return {"centers": list(self.centers), "half_widths": list(self.half_widths),
                "points": list(self.points), "names": list(self.names)}


class Quasimode:
    """Closure evaluating ``u`` and the pieces needed to apply the operator."""

    def __init__(self, sol, amp, lam, N, chi, c_x=None, x_cut=True):
        self.sol = sol
        self.amp = amp
        self.lam = float(lam)
        self.N = int(N)
        self.rho = self.lam ** (1.0 / self.N)
        if not math.isclose(self.rho, amp.rho, rel_tol=1e-12):
            raise ValueError(f"rho mismatch: hierarchy built with {amp.rho}, lambda gives {self.rho}")
        self.delta = 3.0 / self.N
        d = sol.system.op.dims
        self.dims = d
        self.n = d.n
        self.norm_factor = self.lam ** ((self.n - 1) * self.delta / 2)
        self.chi = chi
        self.t0 = amp.t0
        self.y0 = np.asarray(amp.y0, dtype=float)
        if c_x is None:
            c_x = 0.5 * sol.min_im_w2()
        self.c_x = c_x
        self.r_x = math.sqrt(LOG_CUT / (c_x * self.lam)) if x_cut else math.inf
        self._by_alpha = {}
        for (k, alpha), v in amp.phi.items():
            if np.any(v):
                self._by_alpha.setdefault(alpha, []).append(k)

    # ------------------------------------------------------------ interpolation

    def _hermite(self, t):
        """Cubic Hermite weights on the transport nodes (values and t-derivative)."""
        tn = self.amp.t
        i = np.clip(np.searchsorted(tn, t, side="right") - 1, 0, tn.size - 2)
        h = tn[i + 1] - tn[i]
        s = (np.clip(t, tn[0], tn[-1]) - tn[i]) / h
        s2, s3 = s * s, s * s * s
        w = (2 * s3 - 3 * s2 + 1, (s3 - 2 * s2 + s) * h, -2 * s3 + 3 * s2, (s3 - s2) * h)
        dw = ((6 * s2 - 6 * s) / h, 3 * s2 - 4 * s + 1, (-6 * s2 + 6 * s) / h, 3 * s2 - 2 * s)
        inside = (t >= tn[0]) & (t <= tn[-1])
        return i, w, dw, inside

    def profile_rows(self, key, t, weights=None):
        """``phi`` and ``d_t phi`` of one amplitude at times ``t`` on the Y nodes."""
        i, w, dw, inside = weights if weights is not None else self._hermite(t)
        v, dv = self.amp.phi[key], self.amp.dphi_dt[key]
        ex = (slice(None),) + (None,) * (v.ndim - 1)
        val = w[0][ex] * v[i] + w[1][ex] * dv[i] + w[2][ex] * v[i + 1] + w[3][ex] * dv[i + 1]
        dval = dw[0][ex] * v[i] + dw[1][ex] * dv[i] + dw[2][ex] * v[i + 1] + dw[3][ex] * dv[i + 1]
        val[~inside] = 0
        dval[~inside] = 0
        return val, dval

    def to_grid(self, rows, Ys):
        """Spline the Y-node rows onto the scaled grid coordinates ``Ys``."""
        for j, (Yax, Yg) in enumerate(zip(self.amp.Y_axes, Ys)):
            spy = CubicSpline(Yax, rows, axis=1 + j, extrapolate=False)
            rows = np.nan_to_num(spy(Yg))
        return rows

    def y_derivative_rows(self, rows, mu):
        """Plain ``d_Y^mu`` by fourth-order differences on the profile grid."""
        hs = [float(a[1] - a[0]) for a in self.amp.Y_axes]
        return (1j) ** sum(mu) * DY(rows, mu, hs)

    def amplitude_term(self, key, kind, mu, t, Ys):
        """Interpolate ``d_Y^mu`` (kind ``phi``) or ``d_t`` (kind ``dt``) of one amplitude.

        ``t`` is 1-d; ``Ys`` lists 1-d scaled coordinates per leaf axis.
        Returns shape ``(len(t), *map(len, Ys))``; zero outside the stored box.
        """
        val, dval = self.profile_rows(key, np.asarray(t, dtype=float))
        rows = dval if kind == "dt" else val
        if any(mu):
            rows = self.y_derivative_rows(rows, mu)
        return self.to_grid(rows, Ys)

    # ------------------------------------------------------------------ pieces

    def psi_x(self, r, order=0):
        """Radial x-cutoff: 1 for ``r <= r_x``, 0 for ``r >= 1.5 r_x``."""
        if self.r_x == math.inf:
            return np.ones_like(r) if order == 0 else np.zeros_like(r)
        s = lambda rr: smooth_step(1.0 + 2.0 * (rr / self.r_x - 1.0))
        if order == 0:
            return s(r)
        h = 1e-4 * self.r_x
        if order == 1:
            return (s(r + h) - s(r - h)) / (2 * h)
        return (s(r + h) - 2 * s(r) + s(r - h)) / (h * h)

    def chunk(self, t, x_axes, y_axes, derivatives=False):
        """Evaluate on the tensor product ``t x x_axes x y_axes``.

        Returns a dict with ``u`` and, when ``derivatives`` is set, the phase
        derivatives and amplitude derivatives (without the common factor
        ``norm * e^{i lam w}``).
        """
        d = self.dims
        n_x, n_y = d.n_x, d.n_y
        t = np.atleast_1d(np.asarray(t, dtype=float))
        nt = t.size
        xs = np.meshgrid(*x_axes, indexing="ij")
        xshape = xs[0].shape
        full = (nt,) + xshape + tuple(len(a) for a in y_axes)
        ex = (slice(None),) + (None,) * (n_x + n_y)
        xpad = lambda a: a.reshape((1,) + xshape + (1,) * n_y)
        x_pts = np.stack([np.broadcast_to(xpad(x), (nt,) + xshape + (1,) * n_y) for x in xs], -1)
        lo, hi = self.sol.window
        outside = (t < lo) | (t > hi)
        t_in = np.clip(t, lo, hi)
        omega, w_t, w_x = self.sol.eval_phase(t_in[ex], x_pts)
        x0 = self.sol.coefficients(t_in)[0]
        dx0 = self.sol.rates(t_in)[0]
        zphys = x_pts - x0[ex + (slice(None),)]
        rad = np.linalg.norm(zphys, axis=-1)
        psi = self.psi_x(rad)
        chi = np.where(outside, 0.0, self.chi(t))[ex]
        rho = self.rho
        z = rho ** 2 * zphys
        Ys = [rho * (np.asarray(a) - y0) for a, y0 in zip(y_axes, self.y0)]
        ypad = lambda a: a.reshape((nt,) + (1,) * n_x + a.shape[1:])
        M = self.amp.settings.M_x
        ztab = P.table(n_x, M)
        zmon = np.ones(z.shape[:-1] + (len(ztab),), dtype=float)
        for i, a in enumerate(ztab.alphas):
            for j, k in enumerate(a):
                if k:
                    zmon[..., i] = zmon[..., i] * z[..., j] ** k
        mu0 = (0,) * n_y
        Phi = np.zeros(full, dtype=complex)
        parts = {}
        if derivatives:
            Phi_t = np.zeros(full, dtype=complex)
            Phi_z = [np.zeros(full, dtype=complex) for _ in range(n_x)]
            Phi_zz = {(j, k): np.zeros(full, dtype=complex)
                      for j in range(n_x) for k in range(j, n_x)}
            Phi_Y = {mu: np.zeros(full, dtype=complex) for mu in self._mu_keys()}
        weights = self._hermite(t)
        for alpha, levels in self._by_alpha.items():
            rows = drows = 0
            for k in levels:
                v, dv = self.profile_rows((k, alpha), t, weights)
                rows = rows + rho ** (-k) * v
                drows = drows + rho ** (-k) * dv
            mon = zmon[..., ztab.index[alpha]]
            val = ypad(self.to_grid(rows, Ys))
            Phi += val * mon
            if not derivatives:
                continue
            Phi_t += ypad(self.to_grid(drows, Ys)) * mon
            for j in range(n_x):
                if alpha[j] == 0:
                    continue
                b = list(alpha)
                b[j] -= 1
                Phi_z[j] += alpha[j] * val * zmon[..., ztab.index[tuple(b)]]
                for kk in range(j, n_x):
                    c = list(b)
                    if c[kk] == 0:
                        continue
                    fac = alpha[j] * c[kk]
                    c[kk] -= 1
                    Phi_zz[(j, kk)] += fac * val * zmon[..., ztab.index[tuple(c)]]
            for mu_key in self._mu_keys():
                arr = ypad(self.to_grid(self.y_derivative_rows(rows, mu_key), Ys))
                Phi_Y[mu_key] += arr * mon
        phase = np.exp(1j * self.lam * omega)
        a = chi * psi * Phi
        parts["u"] = self.norm_factor * phase * a
        if derivatives:
            chi_t = np.where(outside, 0.0, self.chi.derivative(t))[ex]
            psi1 = self.psi_x(rad, 1)
            psi2 = self.psi_x(rad, 2)
            safe = np.where(rad > 0, rad, 1.0)
            unit = zphys / safe[..., None]
            # gradients in physical x
            grad_psi = psi1[..., None] * unit
            grad_Phi = np.stack([rho ** 2 * p for p in Phi_z], -1)
            # d_t a, d_x a, d_x d_x a, d_y a (plain derivatives)
            dPhi_dt = Phi_t - np.einsum("...j,...j->...", dx0[ex + (slice(None),)], grad_Phi)
            dpsi_dt = -np.einsum("...j,...j->...", dx0[ex + (slice(None),)], grad_psi)
            parts["a"] = a
            parts["a_t"] = chi_t * psi * Phi + chi * dpsi_dt * Phi + chi * psi * dPhi_dt
            parts["a_x"] = [chi * (grad_psi[..., j] * Phi + psi * grad_Phi[..., j])
                            for j in range(n_x)]
            hess = {}
            for j in range(n_x):
                for kk in range(j, n_x):
                    # Hessian of the radial cutoff
                    dij = float(j == kk)
                    hpsi = (psi2 * unit[..., j] * unit[..., kk]
                            + psi1 * (dij - unit[..., j] * unit[..., kk]) / safe)
                    hPhi = rho ** 4 * Phi_zz[(j, kk)]
                    hess[(j, kk)] = chi * (hpsi * Phi + grad_psi[..., j] * grad_Phi[..., kk]
                                           + grad_psi[..., kk] * grad_Phi[..., j] + psi * hPhi)
            parts["a_xx"] = hess
            parts["a_y"] = {mu: chi * psi * rho ** sum(mu) * v for mu, v in Phi_Y.items()}
            parts["omega"] = omega
            parts["omega_t"] = w_t
            parts["omega_x"] = w_x
            parts["phase"] = self.norm_factor * phase
            parts["x"] = x_pts
            parts["t"] = t
        return parts

    def _mu_keys(self):
        n_y = self.dims.n_y
        keys = []
        for j in range(n_y):
            keys.append(tuple(int(i == j) for i in range(n_y)))
        for j in range(n_y):
            for k in range(j, n_y):
                mu = [0] * n_y
                mu[j] += 1
                mu[k] += 1
                keys.append(tuple(mu))
        return keys

    def __call__(self, t, x, y):
        """Pointwise value at a single point ``(t, x, y)``."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        y = np.atleast_1d(np.asarray(y, dtype=float))
        out = self.chunk(np.array([float(t)]), [np.array([v]) for v in x],
                         [np.array([v]) for v in y])["u"]
        return complex(out.ravel()[0])

    # ------------------------------------------------------------------ extents

    def support_box(self):
        """Bounding box of the support: centres and half-widths per axis."""
        lo, hi = self.chi.support
        lo = max(lo, self.amp.t[0])
        hi = min(hi, self.amp.t[-1])
        tt = np.linspace(lo, hi, 201)
        x0 = self.sol.coefficients(tt)[0]
        reach = 1.5 * self.r_x if self.r_x < math.inf else 1.0
        xc = 0.5 * (x0.min(0) + x0.max(0))
        xh = 0.5 * (x0.max(0) - x0.min(0)) + reach
        yh = [h / self.rho for h in self._y_reach()]
        return ([0.5 * (lo + hi)] + list(xc) + list(self.y0),
                [0.5 * (hi - lo)] + list(xh) + yh)

    def _y_reach(self, trim=1e-13):
        """Half-width in ``Y`` beyond which every weighted level is below ``trim`` of the peak."""
        ndim = len(self.amp.Y_axes)
        env = [np.zeros(a.size) for a in self.amp.Y_axes]
        for (k, _), v in self.amp.phi.items():
            a = np.abs(v) * self.rho ** (-k)
            for j in range(ndim):
                other = tuple(i for i in range(a.ndim) if i != j + 1)
                env[j] = np.maximum(env[j], np.max(a, axis=other))
        out = []
        for ax, e in zip(self.amp.Y_axes, env):
            full = float(np.max(np.abs(ax)))
            peak = float(np.max(e))
            if peak == 0.0:
                out.append(full)
                continue
            idx = np.flatnonzero(e >= trim * peak)
            lo, hi = max(idx[0] - 1, 0), min(idx[-1] + 1, ax.size - 1)
            out.append(min(full, max(abs(float(ax[lo])), abs(float(ax[hi])))))
        return out

    def bandwidths(self, samples=65):
        """Per-axis estimate of the highest significant angular frequency."""
        lo, hi = self.chi.support
        lo = max(lo, self.amp.t[0])
        hi = min(hi, self.amp.t[-1])
        d = self.dims
        tt = np.linspace(lo, hi, samples)
        x0, xi0, w0, w = self.sol.coefficients(tt)
        W2 = self.sol.system.w2_matrix(w)
        c_max = float(np.max(np.linalg.eigvalsh(W2.imag)))
        r = min(self.r_x, 1.0) if self.r_x < math.inf else 1.0
        offs = np.linspace(-1.5 * r, 1.5 * r, samples)
        xg = x0[:, None, :] + offs[None, :, None]
        om, wt, wx = self.sol.eval_phase(tt[:, None], xg)
        lam = self.lam
        # only where the Gaussian factor is still above the cut
        live = lam * om.imag <= LOG_CUT
        wt = np.where(live, wt, 0)
        wx = np.where(live[..., None], wx, 0)
        gauss_x = math.sqrt(4 * LOG_CUT * lam * 0.5 * c_max)
        w0dd = np.gradient(np.gradient(w0.imag, tt), tt) if samples > 2 else np.zeros(1)
        gauss_t = math.sqrt(4 * LOG_CUT * lam * 0.5 * max(float(np.max(np.abs(w0dd))), 1e-12))
        chi_bw = 0.0 if self.chi.rad == math.inf else 40.0 / self.chi.rad
        st = self.amp.settings
        y_bw = (math.sqrt(2 * LOG_CUT) if st.profile == "gaussian" else 40.0) / st.bump_radius
        out = [lam * float(np.max(np.abs(wt.real))) + gauss_t + chi_bw]
        for j in range(d.n_x):
            out.append(lam * float(np.max(np.abs(wx[..., j].real))) + gauss_x)
        measured = self.profile_bandwidths()
        for j in range(d.n_y):
            out.append(max(y_bw, measured[j]) * self.rho)
        return out

    def profile_bandwidths(self, rel=1e-22, rows=9, tail_tol=1e-8):
        """Scaled-Y frequency holding all but ``rel`` of the profile energy, per axis."""
        amp = self.amp
        idx = np.unique(np.linspace(0, amp.t.size - 1, rows).astype(int))
        out = []
        for j, ax in enumerate(amp.Y_axes):
            h = float(ax[1] - ax[0])
            k = np.abs(2 * np.pi * np.fft.fftfreq(ax.size, d=h))
            spec = np.zeros(k.size)
            for alpha, levels in self._by_alpha.items():
                comb = sum(self.rho ** (-lv) * amp.phi[(lv, alpha)][idx] for lv in levels)
                F = np.abs(np.fft.fft(comb, axis=1 + j)) ** 2
                spec += np.moveaxis(F, 1 + j, -1).reshape(-1, k.size).sum(0)
            order = np.argsort(k, kind="stable")
            k, spec = k[order], spec[order]
            tail = np.cumsum(spec[::-1])[::-1]
            tot = tail[0] if tail[0] > 0 else 1.0
            above = np.flatnonzero(tail > rel * tot)
            kb = float(k[above[-1]]) if above.size else 0.0
            if tail[-1] > tail_tol * tot:
                raise ResolutionError(
                    f"Nyquist violation on axis {self.dims.y[j]}: transport Y grid under-resolved")
            out.append(kb)
        return out


def assemble_quasimode(sol, amp, lam, N, chi=None, **kw):
    """Quasimode closure for ``lam``; ``amp`` must be built with ``rho = lam^(1/N)``."""
    chi = chi if chi is not None else amp.chi
    if chi is None:
        raise ValueError("a t-cutoff is required (pass chi or build it into the hierarchy)")
    return Quasimode(sol, amp, lam, N, chi, **kw)


def _pow2_at_least(v, lo=8):
    n = lo
    while n < v:
        n *= 2
    return n


def auto_grid(qm, margin=1.5, max_points=None, pad=1.05):
    """Smallest power-of-two grid on the support box meeting the Nyquist margin."""
    centers, halfs = qm.support_box()
    halfs = [h * pad for h in halfs]
    bws = qm.bandwidths()
    pts = []
    for h, bw in zip(halfs, bws):
        need = margin * bw * 2 * h / np.pi
        n = _pow2_at_least(need)
        if max_points is not None:
            n = min(n, max_points)
        pts.append(n)
    d = qm.dims
    names = ("t",) + d.x + d.y
    return Grid(tuple(centers), tuple(halfs), tuple(pts), names)


@dataclass
class GridField:
    grid: Grid
    values: np.ndarray
    report: dict = field(default_factory=dict)


def check_nyquist(qm, grid, margin=1.5):
    bws = qm.bandwidths()
    kmax = grid.max_frequency()
    for name, bw, km in zip(grid.names, bws, kmax):
        if km < margin * bw:
            raise ResolutionError(
                f"Nyquist violation on axis {name}: resolved {km:.4g} < {margin} x {bw:.4g}")
    return {name: {"bandwidth": bw, "k_max": km} for name, bw, km in zip(grid.names, bws, kmax)}


def spectral_tail(values, axis, frac=2.0 / 3.0):
    """Fraction of energy at ``|k| > frac * k_max`` along one axis."""
    F = np.fft.fft(values, axis=axis)
    n = values.shape[axis]
    k = np.abs(np.fft.fftfreq(n)) * 2
    mask = k > frac
    e = np.abs(F) ** 2
    e_axis = np.sum(e, axis=tuple(i for i in range(values.ndim) if i != axis))
    tot = float(np.sum(e_axis))
    return float(np.sum(e_axis[mask]) / tot) if tot > 0 else 0.0


def boundary_leakage(values):
    m = float(np.max(np.abs(values)))
    if m == 0.0:
        return 0.0
    leak = 0.0
    for ax in range(values.ndim):
        for idx in (0, values.shape[ax] - 1):
            leak = max(leak, float(np.max(np.abs(np.take(values, idx, axis=ax)))))
    return leak / m


def evaluate_grid(qm, grid, margin=1.5, leak_tol=1e-10, tail_tol=1e-8, chunk=8, check=True):
    """Sample ``u`` on ``grid`` with Nyquist and support checks."""
    report = {"grid": grid.to_dict()}
    if check:
        report["nyquist"] = check_nyquist(qm, grid, margin)
    axes = grid.axes
    d = qm.dims
    t_ax, x_axes, y_axes = axes[0], axes[1:1 + d.n_x], axes[1 + d.n_x:]
    out = np.empty(grid.shape, dtype=complex)
    for s in range(0, t_ax.size, chunk):
        out[s:s + chunk] = qm.chunk(t_ax[s:s + chunk], x_axes, y_axes)["u"]
    leak = boundary_leakage(out)
    tails = {name: spectral_tail(out, i) for i, name in enumerate(grid.names)}
    report.update({"max_modulus": float(np.max(np.abs(out))), "leakage": leak,
                   "spectral_tail": tails})
    if check:
        if leak > leak_tol:
            raise ResolutionError(f"support escape: boundary leakage {leak:.3g} > {leak_tol:g}")
        for name, v in tails.items():
            if v > tail_tol:
                raise ResolutionError(
                    f"Nyquist violation on axis {name}: spectral tail {v:.3g} > {tail_tol:g}")
    return GridField(grid, out, report)


MAGIC = b"SQMF"


def dump_field(path, gf, meta=None):
    """Binary little-endian dump plus ``<path>.json`` sidecar.

    Layout: ``b"SQMF"``, uint32 version (1), uint32 ndim, ndim x uint64 shape,
    ndim x float64 origin, ndim x float64 spacing, then interleaved
    ``(re, im)`` float64 pairs in row-major order.
    """
    g = gf.grid
    origin = [a[0] for a in g.axes]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", 1, g.ndim))
        fh.write(struct.pack(f"<{g.ndim}Q", *g.shape))
        fh.write(struct.pack(f"<{g.ndim}d", *origin))
        fh.write(struct.pack(f"<{g.ndim}d", *g.spacing))
        inter = np.empty(gf.values.shape + (2,), dtype="<f8")
        inter[..., 0] = gf.values.real
        inter[..., 1] = gf.values.imag
        fh.write(inter.tobytes(order="C"))
    side = {"byte_order": "little", "layout": "interleaved re/im float64, row-major",
            "grid": g.to_dict(), "origin": origin, "spacing": list(g.spacing),
            "report": gf.report, **(meta or {})}
    with open(str(path) + ".json", "w") as fh:
        json.dump(side, fh, indent=2, default=float)


def load_field(path):
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError("not a field dump")
        _, ndim = struct.unpack("<II", fh.read(8))
        shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
        origin = struct.unpack(f"<{ndim}d", fh.read(8 * ndim))
        spacing = struct.unpack(f"<{ndim}d", fh.read(8 * ndim))
        data = np.frombuffer(fh.read(), dtype="<f8").reshape(tuple(shape) + (2,))
    return data[..., 0] + 1j * data[..., 1], origin, spacing
