"""End-to-end pipeline: checks, phase, amplitudes, per-lambda norms and fits."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .conditions import (check_cond1, check_cond2a, detect_sign_change,
                         minimal_bichar_search, select_interval_I)
from .dsl import SymbolFn
from .eikonal import EikonalSolution, EikonalSystem, choose_w2_init, solve_eikonal
from .errors import ConfigError, NumericalError, SubsolveError
from .metrics import (NormField, apply_operator_exact, residual_via_expansion,
                      sobolev_norm, solvability_ratio)
from .quasimode import assemble_quasimode, auto_grid, dump_field, evaluate_grid
from .transport import build_amplitudes, build_cutoff_chi

log = logging.getLogger(__name__)

VERDICTS = ("violation_demonstrated", "rejected_conditions", "inconclusive")
MIN_RATIO_SLOPE = 0.5


class StageError(SubsolveError):
    """Wraps a failure with the pipeline stage that raised it."""

    def __init__(self, stage, exc):
        super().__init__(f"[{stage}] {exc}")
        self.stage = stage
        self.cause = exc
        self.exit_code = getattr(exc, "exit_code", 1)


def _stage(name, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except StageError:
        raise
    except (SubsolveError, ValueError, ArithmeticError) as exc:
        raise StageError(name, exc) from exc


# --------------------------------------------------------------------------
# fitting


@dataclass
class Fit:
    slope: float
    intercept: float
    stderr: float


def fit_slope(pairs):
    """Ordinary least squares on ``(log lambda, log value)`` pairs."""
    pts = np.asarray(list(pairs), dtype=float)
    if pts.ndim != 2 or pts.shape[0] < 2:
        raise ValueError("need at least two points to fit a slope")
    x, y = pts[:, 0], pts[:, 1]
    A = np.vstack([x, np.ones_like(x)]).T
    (slope, icpt), *_ = np.linalg.lstsq(A, y, rcond=None)
    n = x.size
    if n > 2:
        resid = y - (slope * x + icpt)
        s2 = float(resid @ resid) / (n - 2)
        sxx = float(np.sum((x - x.mean()) ** 2))
        se = math.sqrt(s2 / sxx) if sxx > 0 else math.inf
    else:
        se = 0.0
    return Fit(float(slope), float(icpt), float(se))


# --------------------------------------------------------------------------
# stages


def _seed_env(cfg):
    d = cfg.operator.dims
    env = {v: float(a) for v, a in zip(d.x, cfg.x0)}
    env.update({v: float(a) for v, a in zip(d.xi, cfg.xi0)})
    return env


def default_region(cfg, t_star=None):
    d = cfg.operator.dims
    lo, hi = cfg.window
    region = {"t": (lo, hi, 401)}
    for v, c in zip(d.x, cfg.x0):
        region[v] = (c - 0.25, c + 0.25, 5)
    for v, c in zip(d.xi, cfg.xi0):
        region[v] = (c - 0.25, c + 0.25, 5)
    for v, c in zip(d.y, cfg.y0):
        region[v] = (c - 0.5, c + 0.5, 5)
    return region


def run_checks(cfg):
    """Sign change and leaf conditions; returns a dict of reports."""
    op = cfg.operator
    ch = cfg.checks
    seed = _seed_env(cfg)
    out = {}
    if ch.get("minimal_bichar"):
        box = ch.get("bichar_box") or {v: (s - 0.25, s + 0.25, 5) for v, s in seed.items()}
        res = minimal_bichar_search(op.f, cfg.window, {k: tuple(v) for k, v in box.items()})
        seed = dict(res.seed)
        out["minimal_bichar"] = {"seed": seed, "L": res.L}
    rep = detect_sign_change(op.f, seed, cfg.window, tol=ch.get("tol"),
                             order_cap=int(ch.get("order_cap", 12)))
    out["sign_change"] = rep
    p_s = op_ps(cfg)
    region = ch.get("region") or default_region(cfg)
    region = {k: tuple(v) if isinstance(v, list) else v for k, v in region.items()}
    c1_samples = {k: v for k, v in region.items() if k in ("t",) + op.dims.x + op.dims.xi
                  + op.dims.y}
    out["cond1"] = check_cond1(p_s, op.dims, c1_samples)
    kw = {}
    if ch.get("eps_grid"):
        kw["eps_grid"] = tuple(ch["eps_grid"])
    if ch.get("cap"):
        kw["cap"] = float(ch["cap"])
    out["cond2a"] = check_cond2a(op, region, rep, **kw)
    out["seed"] = seed
    return out


def op_ps(cfg):
    text = cfg.raw.get("operator", {}).get("p_s")
    if not text:
        return None
    d = cfg.operator.dims
    return SymbolFn(text, ("t",) + d.x + d.y + d.xi)


def rejected(checks):
    rep = checks["sign_change"]
    if rep.kind in ("none", "wrong_direction"):
        return True
    return any(checks[c].status == "fail" for c in ("cond1", "cond2a"))


def run_eikonal(cfg, checks):
    op = cfg.operator
    d = op.dims
    rep = checks["sign_change"]
    t0 = cfg.t0 if cfg.t0 is not None else rep.t_star
    seed = checks["seed"]
    x0 = np.array([seed[v] for v in d.x])
    xi0 = np.array([seed[v] for v in d.xi])
    e = cfg.eikonal
    if e.get("w2_init_imag") is not None:
        w2 = np.asarray(e["w2_init_imag"], dtype=float) * 1j
        if e.get("w2_init_real") is not None:
            w2 = w2 + np.asarray(e["w2_init_real"], dtype=float)
    else:
        env = {"t": np.array(t0), **{v: np.array(s) for v, s in seed.items()}}
        a = [float(op.f.evaluate(env, {v: 1})) for v in d.x]
        b = [float(op.f.evaluate(env, {v: 1})) for v in d.xi]
        w2 = choose_w2_init(a, b).w2
    return solve_eikonal(op, (float(t0), x0, xi0), int(e["K"]), w2, cfg.window,
                         h=e.get("h"), c_floor=float(e.get("c_floor", 1e-8)))


def save_eikonal(sol, path):
    np.savez(path, t=sol.t, y=sol.y, dy=sol.dy, t0=sol.t0, K=sol.K,
             w0_shift=sol.w0_shift)


def load_eikonal(op, path):
    z = np.load(path)
    system = EikonalSystem(op, int(z["K"]))
    return EikonalSolution(system, z["t"], z["y"], z["dy"], float(z["t0"]), int(z["K"]),
                           complex(z["w0_shift"]), {"loaded_from": str(path)})


def interval_for(cfg, sol, rho):
    iv = cfg.interval
    if iv.get("I0") is not None:
        lo, hi = map(float, iv["I0"])
        return lo, hi, {"source": "config"}
    res = select_interval_I(cfg.operator, sol, rho, float(iv["C"]))
    return res.lo, res.hi, {"source": "selected", "truncated": bool(res.truncated)}


def build_for_lambda(cfg, sol, lam):
    """Cutoff, amplitudes and quasimode for one lambda."""
    rho = lam ** (1.0 / cfg.N)
    lo, hi, info = interval_for(cfg, sol, rho)
    chi = build_cutoff_chi((lo, hi), sol.window)
    amp, _ = build_amplitudes(cfg.operator, sol, rho, cfg.transport, chi.support, chi=chi,
                              y0=cfg.y0)
    qm = assemble_quasimode(sol, amp, lam, cfg.N, chi=chi)
    info.update({"I0": [lo, hi], "chi_support": list(chi.support),
                 "chi_warning": chi.warning, "certificate": amp.certificate})
    return qm, info


@dataclass
class LambdaRow:
    lam: float
    norm_u_minusN: float
    norm_Pu_nu: float
    norm_u_minusNn: float
    ratio: float
    ratio_infinite: bool
    norm_u_0: float
    norm_Pu_expansion: float | None
    grid: dict
    diagnostics: dict
    seconds: float


def measure_lambda(cfg, sol, lam, out_dir=None, residual=True):
    t_start = time.perf_counter()
    qm, info = build_for_lambda(cfg, sol, lam)
    g = cfg.grid
    grid = auto_grid(qm, margin=float(g["margin"]))
    cap = g.get("max_points")
    if cap is not None and max(grid.points) > cap:
        raise NumericalError(
            f"Nyquist violation on axis {grid.names[int(np.argmax(grid.points))]}: "
            f"needs {max(grid.points)} points > max_points {cap}")
    gf = evaluate_grid(qm, grid, margin=float(g["margin"]), leak_tol=float(g["leak_tol"]),
                       tail_tol=float(g["tail_tol"]))
    u = NormField(grid, gf.values, leak_tol=float(g["leak_tol"]))
    Ns, nu, n = int(cfg.norms["N_sob"]), int(cfg.norms["nu"]), cfg.n
    nm = sobolev_norm(u, -Ns)
    nmn = sobolev_norm(u, -Ns - n)
    n0 = sobolev_norm(u, 0)
    npu = math.nan
    nexp = None
    if residual:
        if cfg.residual in ("exact", "both"):
            pu = apply_operator_exact(cfg.operator, qm, grid)
            npu = sobolev_norm(pu, nu, check=False)
        if cfg.residual in ("expansion", "both"):
            pe = residual_via_expansion(cfg.operator, qm, grid)
            nexp = sobolev_norm(pe, nu, check=False)
            if cfg.residual == "expansion":
                npu = nexp
        r = solvability_ratio(nm, npu, nmn)
    else:
        r = solvability_ratio(nm, 0.0, nmn)
    if out_dir is not None and cfg.output.get("dump_fields"):
        dump_field(Path(out_dir) / f"u_lambda{int(lam)}.bin", gf,
                   {"lambda": lam, "N": cfg.N, "config": cfg.name})
    diag = {"interval": info, "field": gf.report, "amp_sup": qm.amp.sup_norms(),
            "dropped_sup": qm.amp.diagnostics.get("dropped_sup")}
    return LambdaRow(lam, nm, npu, nmn, r.value, r.infinite, n0, nexp, grid.to_dict(), diag,
                     time.perf_counter() - t_start)


@dataclass
class SweepResult:
    config_name: str
    config: dict
    checks: dict
    rows: list = field(default_factory=list)
    slopes: dict = field(default_factory=dict)
    verdict: str = "inconclusive"
    version: str = __version__
    notes: list = field(default_factory=list)

    def to_dict(self):
        def enc(v):
            if hasattr(v, "to_dict"):
                return v.to_dict()
            return v
        return {
            "tool": "subsolve",
            "version": self.version,
            "config_name": self.config_name,
            "config": self.config,
            "checks": {k: enc(v) for k, v in self.checks.items()},
            "rows": [asdict(r) for r in self.rows],
            "slopes": {k: asdict(v) for k, v in self.slopes.items()},
            "verdict": self.verdict,
            "notes": self.notes,
        }


def resolve_threads(flag=None):
    if flag is not None:
        return max(1, int(flag))
    env = os.environ.get("SUBSOLVE_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"SUBSOLVE_THREADS must be an integer, got {env!r}") from None
    return 1


def fit_rows(rows):
    lx = [math.log2(r.lam) for r in rows]
    out = {}
    if len(rows) < 2:
        return out
    out["norm_u_minusN"] = fit_slope(zip(lx, [math.log2(r.norm_u_minusN) for r in rows]))
    if all(math.isfinite(r.norm_Pu_nu) and r.norm_Pu_nu > 0 for r in rows):
        out["norm_Pu_nu"] = fit_slope(zip(lx, [math.log2(r.norm_Pu_nu) for r in rows]))
        out["relative_residual"] = fit_slope(
            zip(lx, [math.log2(r.norm_Pu_nu / r.norm_u_0) for r in rows]))
        if not any(r.ratio_infinite for r in rows):
            out["ratio"] = fit_slope(zip(lx, [math.log2(r.ratio) for r in rows]))
    return out


def decide(slopes, min_slope=MIN_RATIO_SLOPE):
    fit = slopes.get("ratio")
    if fit is None:
        return "inconclusive"
    return "violation_demonstrated" if fit.slope >= min_slope else "inconclusive"


def run_sweep(cfg, threads=None, out_dir=None, lambda_max=None, sol=None, residual=True):
    """Full pipeline for a config; deterministic for a fixed config."""
    checks = _stage("check", run_checks, cfg)
    result = SweepResult(cfg.name, cfg.raw, checks)
    if cfg.operator.is_chart_local():
        result.notes.append("chart-local: symbol expressions are not homogeneous in the fibre")
    result.notes.append(f"norm parameters N_sob={cfg.norms['N_sob']}, nu={cfg.norms['nu']} "
                        "are configurable defaults, not values fixed by the theory")
    if rejected(checks):
        result.verdict = "rejected_conditions"
        return result
    if sol is None:
        sol = _stage("eikonal", run_eikonal, cfg, checks)
    lams = [v for v in cfg.lambdas if lambda_max is None or v <= lambda_max]
    if not lams:
        raise ConfigError("no lambda left after --lambda-max")
    workers = resolve_threads(threads if threads is not None else cfg.threads)

    def one(lam):
        return _stage(f"lambda={lam:g}", measure_lambda, cfg, sol, lam, out_dir, residual)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            rows = list(ex.map(one, lams))
    else:
        rows = [one(lam) for lam in lams]
    result.rows = rows
    result.slopes = fit_rows(rows)
    result.verdict = decide(result.slopes) if residual else "inconclusive"
    if not residual:
        result.notes.append("residual not computed; verdict left inconclusive")
    return result


# --------------------------------------------------------------------------
# reporting


def _g17(v):
    if v is None:
        return ""
    return format(float(v), ".17g")


def emit_report(result, out_dir):
    """Write ``sweep.csv``, ``sweep.json`` and ``ratio_plot.csv`` into ``out_dir``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        paths = {"csv": out / "sweep.csv", "json": out / "sweep.json",
                 "plot": out / "ratio_plot.csv"}
        with open(paths["csv"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["lambda", "norm_u_minusN", "norm_Pu_nu", "norm_u_minusNn", "ratio"])
            for r in result.rows:
                w.writerow([_g17(r.lam), _g17(r.norm_u_minusN), _g17(r.norm_Pu_nu),
                            _g17(r.norm_u_minusNn), _g17(r.ratio)])
        with open(paths["plot"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["log2_lambda", "log2_ratio"])
            for r in result.rows:
                lr = math.log2(r.ratio) if r.ratio > 0 and math.isfinite(r.ratio) else math.nan
                w.writerow([_g17(math.log2(r.lam)), _g17(lr)])
        with open(paths["json"], "w") as fh:
            json.dump(result.to_dict(), fh, indent=2, default=_json_default)
    except OSError as exc:
        raise ConfigError(f"cannot write report to {out}: {exc}") from None
    return paths


def _json_default(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, complex):
        return [v.real, v.imag]
    if isinstance(v, float) and not math.isfinite(v):
        return str(v)
    return str(v)
