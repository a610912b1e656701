"""Sampled checks of the geometric hypotheses on a normal-form configuration."""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.integrate import cumulative_trapezoid

from .dsl import Dims, SymbolFn, compile_expr, diff_expr, free_vars

log = logging.getLogger(__name__)

LeafChart = Dims


@dataclass
class SignChangeReport:
    kind: str  # finite | infinite | none | wrong_direction
    k: int | None = None
    t_star: float | None = None
    seed: dict = field(default_factory=dict)
    kappa_scale: float | None = None
    order_cap: int = 12
    tol: float = 0.0
    ambiguous: bool = False
    derivatives: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


@dataclass
class ConditionReport:
    condition: str  # cond1 | cond2a | subprincipal_type
    status: str  # pass | fail | not_required
    constants: dict = field(default_factory=dict)
    samples: str = ""
    worst: dict | None = None
    notes: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


def _line(f, seed):
    """``t -> f(t, seed)`` as a vectorised callable."""
    if callable(f) and not isinstance(f, SymbolFn):
        return lambda t: np.asarray(f(np.asarray(t, dtype=float), **seed), dtype=float)
    return lambda t: np.broadcast_to(
        np.asarray(f.evaluate({"t": np.asarray(t, dtype=float), **seed}), dtype=float),
        np.shape(t))


def _t_derivative(f, seed, k, t):
    e = f.expr
    for _ in range(k):
        e = diff_expr(e, "t")
    env = {"t": float(t), **{k_: float(v) for k_, v in seed.items()}}
    with np.errstate(all="ignore"):
        return float(compile_expr(e)({v: env.get(v, 0.0) for v in free_vars(e)}))


def _crossings(t, g):
    """Sign transitions of samples, skipping exact zeros.

    Yields ``(i, j, direction)`` with ``g[i]`` and ``g[j]`` of opposite signs and
    only zeros between them.
    """
    s = np.sign(g)
    nz = np.flatnonzero(s)
    out = []
    for a, b in zip(nz[:-1], nz[1:]):
        if s[a] != s[b]:
            out.append((int(a), int(b), "down" if s[a] > 0 else "up"))
    return out


def detect_sign_change(f, seed, window, tol=None, order_cap=12, samples=4001):
    """Classify the first ``+`` to ``-`` change of ``t -> f(t, seed)`` in ``window``.

    ``seed`` maps variable names (``x1``, ``xi1``, ...) to values.  The order is the
    smallest ``k`` with ``|d_t^k f(t*)| > tol``; if none up to ``order_cap`` the
    change is infinite.
    """
    seed = {k: float(v) for k, v in dict(seed).items()}
    g = _line(f, seed)
    t = np.linspace(window[0], window[1], samples)
    vals = g(t)
    scale = float(np.max(np.abs(vals))) or 1.0
    tol = 1e-9 * scale if tol is None else float(tol)
    rep = SignChangeReport("none", seed=seed, order_cap=order_cap, tol=tol)
    cross = _crossings(t, vals)
    down = [c for c in cross if c[2] == "down"]
    if not down:
        if cross:
            rep.kind = "wrong_direction"
            i, j, _ = cross[0]
            rep.t_star = _locate(g, t, vals, i, j)
        return rep
    i, j, _ = down[0]
    t_star = _locate(g, t, vals, i, j)
    rep.t_star = t_star
    derivs = []
    for k in range(1, order_cap + 1):
        d = _t_derivative(f, seed, k, t_star)
        derivs.append(d)
        if tol / 10 < abs(d) < 10 * tol:
            rep.ambiguous = True
        if abs(d) > tol:
            rep.k = k
            rep.kappa_scale = abs(d)
            break
    rep.derivatives = derivs
    if rep.k is None:
        rep.kind = "infinite"
    else:
        rep.kind = "finite"
        if rep.k % 2 == 0 or derivs[-1] > 0:
            rep.warnings.append(
                f"leading derivative of order {rep.k} has sign {np.sign(derivs[-1]):+.0f}")
    if rep.ambiguous:
        rep.warnings.append("a derivative lies within 10x of the tolerance")
    return rep


def _locate(g, t, vals, i, j):
    if j == i + 1:
        a, b = float(t[i]), float(t[j])
        sa = np.sign(vals[i])
        for _ in range(200):
            m = 0.5 * (a + b)
            if m in (a, b):
                break
            gm = float(g(m))
            if gm == 0.0:
                return m
            if np.sign(gm) == sa:
                a = m
            else:
                b = m
        return 0.5 * (a + b)
    # plateau of exact zeros between i and j: take its midpoint
    return float(0.5 * (t[i + 1] + t[j - 1]))


def _as_complex(p_s, env):
    if isinstance(p_s, tuple):
        re, im = p_s
        return (np.asarray(re.evaluate(env), dtype=float)
                + 1j * np.asarray(im.evaluate(env), dtype=float))
    return np.asarray(p_s.evaluate(env), dtype=complex)


def _grad_y(p_s, env, chart):
    parts = []
    for y in chart.y:
        if isinstance(p_s, tuple):
            re, im = p_s
            parts.append(np.asarray(re.evaluate(env, {y: 1}), dtype=float)
                         + 1j * np.asarray(im.evaluate(env, {y: 1}), dtype=float))
        else:
            parts.append(np.asarray(p_s.evaluate(env, {y: 1}), dtype=complex))
    return np.sqrt(sum(np.abs(p) ** 2 for p in parts))


def sample_grid(spec):
    """Tensor grid from ``{name: (lo, hi, count)}``; returns a dict of flat arrays."""
    if not spec:
        raise ValueError("sample spec is empty")
    names = list(spec)
    axes = [np.asarray(spec[n], dtype=float) if isinstance(spec[n], np.ndarray)
            else np.linspace(*spec[n][:2], int(spec[n][2])) for n in names]
    mesh = np.meshgrid(*axes, indexing="ij")
    return {n: m.ravel() for n, m in zip(names, mesh)}


def check_cond1(p_s, chart, samples, tol=1e-10, cap=1e8):
    """Leaf bound ``|d_y p_s| <= C0 |p_s|`` on samples.

    ``p_s`` is ``None`` (normal-form input), a SymbolFn or a ``(re, im)`` pair.
    ``samples`` is a grid spec or a dict of arrays.
    """
    if p_s is None:
        return ConditionReport("cond1", "pass", {"C0": 0.0}, "not sampled",
                               notes=["normal form: f does not depend on y"])
    if not samples:
        raise ValueError("sample spec is empty")
    env = samples if isinstance(next(iter(samples.values())), np.ndarray) else sample_grid(samples)
    env = {k: np.asarray(v, dtype=float) for k, v in env.items()}
    if not env or next(iter(env.values())).size == 0:
        raise ValueError("sample spec is empty")
    p = _as_complex(p_s, env)
    gy = _grad_y(p_s, env, chart)
    away = np.abs(p) >= tol
    ratio = np.where(away, gy / np.where(away, np.abs(p), 1.0), 0.0)
    C0 = float(np.max(ratio)) if np.any(away) else 0.0
    near_bad = (~away) & (gy >= tol * (1 + C0))
    desc = f"{p.size} samples over {sorted(env)}"
    if np.any(near_bad):
        i = int(np.flatnonzero(near_bad)[0])
        return ConditionReport("cond1", "fail", {"C0": math.inf}, desc,
                               {k: float(v[i]) for k, v in env.items()},
                               ["p_s vanishes where its y-gradient does not"])
    i = int(np.argmax(ratio))
    status = "pass" if C0 <= cap else "fail"
    return ConditionReport("cond1", status, {"C0": C0}, desc,
                           {k: float(v[i]) for k, v in env.items()})


DEFAULT_EPS_GRID = (1.0, 0.75, 0.5, 0.25, 0.125, 0.0625)


def check_cond2a(op, region, report, eps_grid=DEFAULT_EPS_GRID, cap=1e6, f_floor=1e-200):
    """Vanishing-rate bound ``|B| + |A| + |df| <= C |f|^eps`` on a sampled region.

    Only required for infinite-order sign changes.  Samples where ``|f|`` is
    below ``f_floor`` (floating-point underflow of flat factors) are skipped.
    """
    if report is not None and report.kind == "finite":
        return ConditionReport("cond2a", "not_required",
                               notes=[f"finite order sign change (k={report.k})"])
    d = op.dims
    if isinstance(next(iter(region.values())), np.ndarray):
        env = region
    else:
        spec = dict(region)
        if report is not None and report.t_star is not None and "t" in spec:
            # densify towards the zero of f, where the ratio is decided
            lo, hi, cnt = spec["t"]
            offs = np.geomspace(1e-4, 1.0, 121) * (hi - lo)
            tt = np.concatenate([np.linspace(lo, hi, int(cnt)),
                                 report.t_star + offs, report.t_star - offs])
            spec["t"] = np.unique(tt[(tt >= lo) & (tt <= hi)])
        env = sample_grid(spec)
    env = {k: np.asarray(v, dtype=float) for k, v in env.items()}
    shape = next(iter(env.values())).shape
    for v in d.eta:
        env[v] = np.zeros(shape)
    fval = np.asarray(op.f.evaluate(env), dtype=float)
    df2 = np.zeros(shape)
    for v in ("t",) + d.x + d.xi:
        df2 += np.asarray(op.f.evaluate(env, {v: 1}), dtype=float) ** 2
    A2 = sum(np.asarray(a.evaluate(env), dtype=float) ** 2 for a in op.A)
    Bm = np.empty(shape + (d.n_y, d.n_y))
    for i, row in enumerate(op.B):
        for k, b in enumerate(row):
            Bm[..., i, k] = b.evaluate(env)
    Bn = np.linalg.norm(Bm.reshape(-1, d.n_y, d.n_y), ord=2, axis=(1, 2)).reshape(shape)
    num = Bn + np.sqrt(A2) + np.sqrt(df2)
    keep = np.abs(fval) >= f_floor
    if not np.any(keep):
        return ConditionReport("cond2a", "fail", notes=["f underflows on every sample"])
    af = np.abs(fval[keep])
    best = None
    sups = {}
    for eps in sorted(eps_grid, reverse=True):
        with np.errstate(over="ignore", divide="ignore"):
            r = num[keep] / af ** eps
        sup = float(np.max(r))
        sups[eps] = sup
        if np.isfinite(sup) and sup <= cap:
            best = (eps, sup, int(np.argmax(r)))
            break
    desc = f"{int(np.count_nonzero(keep))} samples with |f| >= {f_floor:g}"
    if best is None:
        return ConditionReport("cond2a", "fail", {"sup_by_eps": sups}, desc,
                               notes=["no grid exponent gives a finite bound under the cap"])
    eps, sup, i = best
    idx = np.flatnonzero(keep)[i]
    worst = {k: float(v.ravel()[idx]) for k, v in env.items()}
    return ConditionReport("cond2a", "pass", {"eps": eps, "C": sup}, desc, worst)


@dataclass
class BicharSearchResult:
    seed: dict
    L: float
    grid: dict
    L_grid: np.ndarray


def _gap(g, t, vals):
    """``inf {t - s : s < t, g(s) > 0 > g(t)}`` on samples with boundary refinement."""
    best = math.inf
    last_pos = None
    for j in range(len(t)):
        if vals[j] > 0:
            last_pos = j
        elif vals[j] < 0 and last_pos is not None:
            s_hi = _bisect(g, t[last_pos], t[last_pos + 1], lambda v: v > 0)
            k = j - 1
            t_lo = _bisect(g, t[k], t[j], lambda v: not v < 0)
            best = min(best, max(0.0, t_lo - s_hi))
            last_pos = None
    return best


def _bisect(g, a, b, pred, iters=60):
    """Last point in ``[a, b]`` where ``pred(g)`` holds, assuming it holds at ``a``."""
    for _ in range(iters):
        m = 0.5 * (a + b)
        if pred(float(g(m))):
            a = m
        else:
            b = m
    return 0.5 * (a + b)


def minimal_bichar_search(f, window, box, t_samples=801):
    """Grid search for the seed with the shortest ``+`` to ``-`` gap ``L``.

    ``box`` maps variable names to ``(lo, hi, count)``; ``f`` is a SymbolFn or a
    callable ``f(t, **seed)``.  Raises ``ValueError`` when no change exists.
    """
    names = list(box)
    axes = [np.linspace(*box[n][:2], int(box[n][2])) for n in names]
    centre = np.array([0.5 * (box[n][0] + box[n][1]) for n in names])
    t = np.linspace(window[0], window[1], t_samples)
    L = np.full([len(a) for a in axes], math.inf)
    best = None
    for idx in itertools.product(*[range(len(a)) for a in axes]):
        pt = {n: float(axes[k][i]) for k, (n, i) in enumerate(zip(names, idx))}
        g = _line(f, pt)
        Lv = _gap(g, t, g(t))
        L[idx] = Lv
        if not math.isfinite(Lv):
            continue
        dist = float(np.linalg.norm(np.array([pt[n] for n in names]) - centre))
        key = (Lv, dist)
        if best is None or key < best[0]:
            best = (key, pt)
    if best is None:
        raise ValueError("no + to - sign change found in the search box")
    return BicharSearchResult(best[1], best[0][0], dict(zip(names, axes)), L)


@dataclass
class IntlemResult:
    kappa: float | None
    bound: float | None
    min_F: float | None
    passed: bool | None
    diagnostic: str = ""


def intlem_min_bound(t, F, t0, rho, C_rho, dF=None, rtol=1e-9):
    """Check ``min_{I} F <= -C_rho kappa^(1+rho)`` on sampled data.

    ``I`` joins 0 and ``t0``; ``kappa = |F'(t0)|``.  Violated preconditions
    give ``passed=None`` with a diagnostic.
    """
    t = np.asarray(t, dtype=float)
    F = np.asarray(F, dtype=float)
    dF = np.gradient(F, t) if dF is None else np.asarray(dF, dtype=float)
    scale = max(float(np.max(np.abs(F))), 1e-300)
    F0 = float(np.interp(0.0, t, F))
    if abs(F0) > rtol * scale + 1e-14 or np.max(F) > abs(F0) + rtol * scale + 1e-14:
        return IntlemResult(None, None, None, None, "F(0) = 0 is not the maximum")
    lo, hi = sorted((0.0, float(t0)))
    inside = (t >= lo - 1e-12) & (t <= hi + 1e-12)
    kappa = abs(float(np.interp(t0, t, dF)))
    if kappa > 1 + rtol:
        return IntlemResult(kappa, None, None, None, "kappa > 1")
    if np.max(np.abs(dF[inside])) > kappa * (1 + 1e-6) + 1e-12:
        return IntlemResult(kappa, None, None, None, "|F'| is not maximal at t0")
    if abs(t0) < kappa ** rho * (1 - 1e-9):
        return IntlemResult(kappa, None, None, None, "|t0| < kappa^rho")
    min_F = float(np.min(F[inside]))
    bound = -C_rho * kappa ** (1 + rho)
    passed = min_F <= bound + rtol * abs(bound)
    return IntlemResult(kappa, bound, min_F, bool(passed))


@dataclass
class IntervalResult:
    lo: float
    hi: float
    truncated: bool
    h: np.ndarray = None
    t: np.ndarray = None

    @property
    def length(self):
        return self.hi - self.lo


def interval_integrands(op, sol, t, C, y_samples=9):
    """``|f|`` along the trajectory and ``|A0| + |A1| + |A2|`` (max over leaf samples)."""
    d = op.dims
    x0, xi0, w0, w = sol.coefficients(t)
    dx0 = sol.rates(t)[0]
    env = {"t": t, "tau": np.zeros_like(t)}
    for j in range(d.n_x):
        env[d.x[j]] = x0[:, j]
        env[d.xi[j]] = xi0[:, j]
    for v in d.eta:
        env[v] = np.zeros_like(t)
    fabs = np.abs(np.asarray(op.f.evaluate(env), dtype=float))
    dfxi = np.stack([np.asarray(op.f.evaluate(env, {v: 1}), dtype=float) for v in d.xi], -1)
    A0 = np.linalg.norm(1j * dfxi - dx0, axis=-1)
    ys = np.linspace(-1.0 / C, 1.0 / C, y_samples)
    best = np.zeros_like(t)
    for yv in itertools.product(ys, repeat=d.n_y):
        e = dict(env)
        for j, v in enumerate(d.y):
            e[v] = np.full_like(t, yv[j])
        A1 = np.sqrt(sum(np.asarray(a.evaluate(e), dtype=float) ** 2 for a in op.A))
        Bm = np.empty(t.shape + (d.n_y, d.n_y))
        for i, row in enumerate(op.B):
            for k, b in enumerate(row):
                Bm[:, i, k] = b.evaluate(e)
        A2 = np.linalg.norm(Bm, ord=2, axis=(1, 2))
        best = np.maximum(best, A1 + A2)
    return fabs, A0 + best


def select_interval_I(op, sol, rho, C, t0=None, nodes=None, refine=True):
    """Maximal interval around ``t0`` where ``|f| + |int_{t0}^t (...)| < C / rho^3``.

    A pass on the solver nodes is refined on a dense grid around the result.
    """
    res = _select_interval(op, sol, rho, C, t0, nodes)
    if refine and nodes is None:
        lo_w, hi_w = sol.window
        pad = 4 * float(np.max(np.diff(sol.t)))
        fine = np.linspace(max(lo_w, res.lo - pad), min(hi_w, res.hi + pad), 4001)
        t0v = sol.t0 if t0 is None else t0
        fine = np.union1d(fine, [t0v])
        ref = _select_interval(op, sol, rho, C, t0v, fine)
        ref.truncated = res.truncated
        if res.truncated:
            ref.lo = res.lo if res.lo <= lo_w else ref.lo
            ref.hi = res.hi if res.hi >= hi_w else ref.hi
        return ref
    return res


def _select_interval(op, sol, rho, C, t0, nodes):
    lo_w, hi_w = sol.window
    t0 = sol.t0 if t0 is None else t0
    t = np.asarray(sol.t if nodes is None else nodes, dtype=float)
    fabs, integrand = interval_integrands(op, sol, t, C)
    i0 = int(np.argmin(np.abs(t - t0)))
    cum = cumulative_trapezoid(integrand, t, initial=0.0)
    h = fabs + np.abs(cum - cum[i0])
    thr = C / rho ** 3
    bad = h >= thr
    truncated = False
    right = np.flatnonzero(bad[i0:])
    if right.size:
        j = i0 + int(right[0])
        hi = _cross(t[j - 1], t[j], h[j - 1], h[j], thr) if j > i0 else t[i0]
    else:
        hi, truncated = hi_w, True
    left = np.flatnonzero(bad[:i0 + 1][::-1])
    if left.size:
        j = i0 - int(left[0])
        lo = _cross(t[j], t[j + 1], h[j], h[j + 1], thr) if j < i0 else t[i0]
    else:
        lo, truncated = lo_w, True
    return IntervalResult(float(lo), float(hi), truncated, h, t)


def _cross(ta, tb, ha, hb, thr):
    if hb == ha:
        return 0.5 * (ta + tb)
    return float(ta + (thr - ha) * (tb - ta) / (hb - ha))
