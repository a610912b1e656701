"""Command line entry point ``subsolve``.

Exit codes: 0 violation demonstrated (or checks passed for ``check``),
1 inconclusive or unexpected failure, 2 rejected conditions, 3 numerical
failure, 4 configuration error.
"""

from __future__ import annotations

import hashlib
import json
import logging
import sys
from pathlib import Path

import click
import jsonschema
import numpy as np

from . import __version__
from .config import report_schema, resolve_config
from .errors import ConfigError, SubsolveError
from .harness import (StageError, build_for_lambda, emit_report, load_eikonal, rejected,
                      resolve_threads, run_checks, run_eikonal, run_sweep, save_eikonal)
from .quasimode import auto_grid, dump_field, evaluate_grid

EXIT = {"violation_demonstrated": 0, "rejected_conditions": 2, "inconclusive": 1}


def _config_hash(cfg):
    return hashlib.sha256(json.dumps(cfg.raw, sort_keys=True).encode()).hexdigest()[:16]


def _dump(obj, path):
    def enc(v):
        if hasattr(v, "to_dict"):
            return v.to_dict()
        if isinstance(v, (np.floating, np.integer)):
            return v.item()
        if isinstance(v, np.ndarray):
            return v.tolist()
        return str(v)
    Path(path).write_text(json.dumps(obj, indent=2, default=enc))


def _fail(exc):
    click.echo(f"error: {exc}", err=True)
    sys.exit(getattr(exc, "exit_code", 1))


def common(fn):
    fn = click.option("--threads", type=int, default=None,
                      help="worker threads (overrides SUBSOLVE_THREADS)")(fn)
    fn = click.option("--lambda-max", "lambda_max", type=float, default=None,
                      help="drop lambdas above this value")(fn)
    fn = click.option("--out", "out", type=click.Path(file_okay=False), default=None,
                      help="output directory (default: config output.dir)")(fn)
    fn = click.option("--config", "config", required=True,
                      help="config file or shipped config name")(fn)
    return fn


class Ctx:
    def __init__(self, config, out, lambda_max, threads):
        try:
            self.cfg = resolve_config(config)
        except SubsolveError as exc:
            _fail(exc)
        self.out = Path(out or self.cfg.output.get("dir", "out"))
        self.lambda_max = lambda_max
        self.threads = resolve_threads(threads if threads is not None else self.cfg.threads)
        try:
            self.out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            _fail(ConfigError(f"cannot create {self.out}: {exc}"))

    def checks(self):
        ch = run_checks(self.cfg)
        _dump({k: v for k, v in ch.items()}, self.out / "checks.json")
        return ch

    def eikonal(self, ch):
        path = self.out / "eikonal.npz"
        meta = self.out / "eikonal.json"
        h = _config_hash(self.cfg)
        if path.exists() and meta.exists() and json.loads(meta.read_text()).get("hash") == h:
            return load_eikonal(self.cfg.operator, path)
        sol = run_eikonal(self.cfg, ch)
        save_eikonal(sol, path)
        _dump({"hash": h, "window": sol.window, "t0": sol.t0, "K": sol.K,
               "min_im_w2": sol.min_im_w2(), "meta": sol.meta}, meta)
        return sol

    def lambdas(self):
        lams = [v for v in self.cfg.lambdas if self.lambda_max is None or v <= self.lambda_max]
        if not lams:
            _fail(ConfigError("no lambda left after --lambda-max"))
        return lams


def _guard(fn):
    def wrapped(*a, **kw):
        try:
            return fn(*a, **kw)
        except StageError as exc:
            _fail(exc)
        except SubsolveError as exc:
            _fail(exc)
    wrapped.__name__ = fn.__name__
    wrapped.__doc__ = fn.__doc__
    return wrapped


@click.group()
@click.version_option(__version__, prog_name="subsolve")
@click.option("-v", "--verbose", is_flag=True)
def main(verbose):
    """Quasimode construction and solvability sweeps for normal-form operators."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


@main.command()
@common
@_guard
def check(config, out, lambda_max, threads):
    """Sign change and leaf conditions only."""
    c = Ctx(config, out, lambda_max, threads)
    ch = c.checks()
    rep = ch["sign_change"]
    click.echo(f"sign change: {rep.kind}" + (f" (k={rep.k})" if rep.k else ""))
    for name in ("cond1", "cond2a"):
        click.echo(f"{name}: {ch[name].status} {ch[name].constants}")
    sys.exit(2 if rejected(ch) else 0)


@main.command()
@common
@_guard
def eikonal(config, out, lambda_max, threads):
    """Checks, then the phase coefficients (saved as eikonal.npz)."""
    c = Ctx(config, out, lambda_max, threads)
    ch = c.checks()
    if rejected(ch):
        click.echo("verdict: rejected_conditions")
        sys.exit(2)
    sol = c.eikonal(ch)
    click.echo(f"eikonal: window {sol.window}, min eig Im w2 {sol.min_im_w2():.6g}")


@main.command()
@common
@_guard
def transport(config, out, lambda_max, threads):
    """Amplitude hierarchies per lambda (summary in transport.json)."""
    c = Ctx(config, out, lambda_max, threads)
    ch = c.checks()
    if rejected(ch):
        click.echo("verdict: rejected_conditions")
        sys.exit(2)
    sol = c.eikonal(ch)
    summary = {}
    for lam in c.lambdas():
        qm, info = build_for_lambda(c.cfg, sol, lam)
        summary[str(lam)] = {"interval": info, "amp": qm.amp.summary()}
        click.echo(f"lambda={lam:g}: I0={info['I0']}, sup|phi_k|={qm.amp.sup_norms()}")
    _dump(summary, c.out / "transport.json")


@main.command()
@common
@_guard
def build(config, out, lambda_max, threads):
    """Assemble and sample the quasimodes; writes binary field dumps."""
    c = Ctx(config, out, lambda_max, threads)
    ch = c.checks()
    if rejected(ch):
        click.echo("verdict: rejected_conditions")
        sys.exit(2)
    sol = c.eikonal(ch)
    g = c.cfg.grid
    for lam in c.lambdas():
        qm, info = build_for_lambda(c.cfg, sol, lam)
        grid = auto_grid(qm, margin=float(g["margin"]))
        gf = evaluate_grid(qm, grid, margin=float(g["margin"]), leak_tol=float(g["leak_tol"]),
                           tail_tol=float(g["tail_tol"]))
        path = c.out / f"u_lambda{int(lam)}.bin"
        dump_field(path, gf, {"lambda": lam, "N": c.cfg.N, "config": c.cfg.name})
        click.echo(f"lambda={lam:g}: grid {grid.points} -> {path}")


@main.command()
@common
@_guard
def sweep(config, out, lambda_max, threads):
    """Full pipeline and report files."""
    c = Ctx(config, out, lambda_max, threads)
    ch = c.checks()
    sol = None if rejected(ch) else c.eikonal(ch)
    res = run_sweep(c.cfg, threads=c.threads, out_dir=c.out, lambda_max=lambda_max, sol=sol)
    paths = emit_report(res, c.out)
    for r in res.rows:
        click.echo(f"lambda={r.lam:g} ratio={r.ratio:.6g}")
    for k, f in res.slopes.items():
        click.echo(f"slope[{k}] = {f.slope:.4f} +- {f.stderr:.4f}")
    click.echo(f"verdict: {res.verdict}")
    click.echo(f"report: {paths['json']}")
    sys.exit(EXIT[res.verdict])


@main.command()
@common
@_guard
def report(config, out, lambda_max, threads):
    """Re-emit CSV files from a stored sweep.json (running the sweep if absent)."""
    c = Ctx(config, out, lambda_max, threads)
    path = c.out / "sweep.json"
    if not path.exists():
        ch = c.checks()
        sol = None if rejected(ch) else c.eikonal(ch)
        res = run_sweep(c.cfg, threads=c.threads, out_dir=c.out, lambda_max=lambda_max, sol=sol)
        emit_report(res, c.out)
    data = json.loads(path.read_text())
    try:
        jsonschema.validate(data, report_schema())
    except jsonschema.ValidationError as exc:
        _fail(ConfigError(f"stored report does not match the schema: {exc.message}"))
    _rewrite_csv(data, c.out)
    click.echo(f"verdict: {data['verdict']}")
    sys.exit(EXIT[data["verdict"]])


def _rewrite_csv(data, out):
    import csv
    import math
    g = lambda v: format(float(v), ".17g")
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lambda", "norm_u_minusN", "norm_Pu_nu", "norm_u_minusNn", "ratio"])
        for r in data["rows"]:
            w.writerow([g(r["lam"]), g(r["norm_u_minusN"]), g(r["norm_Pu_nu"]),
                        g(r["norm_u_minusNn"]), g(r["ratio"])])
    with open(out / "ratio_plot.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["log2_lambda", "log2_ratio"])
        for r in data["rows"]:
            ratio = float(r["ratio"])
            lr = math.log2(ratio) if ratio > 0 and math.isfinite(ratio) else math.nan
            w.writerow([g(math.log2(r["lam"])), g(lr)])


if __name__ == "__main__":
    main()
