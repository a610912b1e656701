"""Run configuration: JSON files validated against the shipped schema."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .errors import ConfigError
from .operator import NormalFormOperator
from .transport import TransportSettings

DEFAULTS = {
    "N": 12,
    "eikonal": {"K": 6, "h": None, "w2_init_imag": None, "w2_init_real": None, "c_floor": 1e-8},
    "transport": {"K_amp": 2, "M_x": 4, "T_f": 2, "y_half_width": 1.0, "y_points": 128,
                  "bump_radius": 0.25, "profile": "bump", "t_points": 401},
    "interval": {"C": 1.0, "I0": None},
    "grid": {"margin": 1.5, "max_points": 512, "leak_tol": 1e-10, "tail_tol": 1e-8},
    "norms": {"N_sob": 1, "nu": 0},
    "residual": "exact",
    "checks": {"order_cap": 12, "tol": None, "region": None, "eps_grid": None, "cap": 1e6,
               "minimal_bichar": False, "bichar_box": None},
    "output": {"dir": "out", "dump_fields": False},
    "threads": None,
}


def schema():
    text = resources.files("subsolve").joinpath("schemas/run_config.schema.json").read_text()
    return json.loads(text)


def report_schema():
    text = resources.files("subsolve").joinpath("schemas/sweep_result.schema.json").read_text()
    return json.loads(text)


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class RunConfig:
    raw: dict
    operator: NormalFormOperator
    name: str
    t0: float | None
    x0: np.ndarray
    xi0: np.ndarray
    y0: np.ndarray
    window: tuple
    N: int
    lambdas: tuple
    eikonal: dict
    transport: TransportSettings
    interval: dict
    grid: dict
    norms: dict
    residual: str
    checks: dict
    output: dict
    threads: int | None
    source: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def n(self):
        """Base dimension ``1 + n_x + n_y`` (never configured)."""
        return self.operator.dims.n

    @classmethod
    def from_dict(cls, data, source=""):
        try:
            jsonschema.validate(data, schema())
        except jsonschema.ValidationError as exc:
            path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"config invalid at {path}: {exc.message}") from None
        full = _merge(DEFAULTS, data)
        lams = tuple(float(v) for v in full["lambdas"])
        if not lams:
            raise ConfigError("lambda list is empty")
        if any(b <= a for a, b in zip(lams, lams[1:])):
            raise ConfigError("lambda list must be strictly increasing")
        if any(v < 32 for v in lams):
            raise ConfigError("every lambda must be >= 2^5")
        if full["N"] < 10:
            raise ConfigError("N must be >= 10")
        try:
            op = NormalFormOperator.from_dict(full["operator"] | {"name": full.get("name", "")})
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"operator: {exc}") from None
        d = op.dims
        seed = full["seed"]
        x0 = np.asarray(seed["x0"], dtype=float)
        xi0 = np.asarray(seed["xi0"], dtype=float)
        y0 = np.asarray(seed.get("y0", [0.0] * d.n_y), dtype=float)
        if x0.size != d.n_x or xi0.size != d.n_x or y0.size != d.n_y:
            raise ConfigError("seed dimensions do not match n_x / n_y")
        lo, hi = map(float, full["window"])
        if not hi > lo:
            raise ConfigError("window must be increasing")
        t0 = seed.get("t0")
        if t0 is not None and not lo <= t0 <= hi:
            raise ConfigError("seed t0 lies outside the window")
        tr = TransportSettings(N=int(full["N"]), **full["transport"])
        tr.validate()
        return cls(raw=data, operator=op, name=str(full.get("name", "")), t0=t0, x0=x0,
                   xi0=xi0, y0=y0, window=(lo, hi), N=int(full["N"]), lambdas=lams,
                   eikonal=full["eikonal"], transport=tr, interval=full["interval"],
                   grid=full["grid"], norms=full["norms"], residual=full["residual"],
                   checks=full["checks"], output=full["output"], threads=full["threads"],
                   source=source)

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        return cls.from_dict(data, str(path))

    def with_overrides(self, **changes):
        data = _merge(self.raw, changes)
        return RunConfig.from_dict(data, self.source)


def shipped_configs():
    root = resources.files("subsolve").joinpath("configs")
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def shipped_config_path(name):
    root = resources.files("subsolve").joinpath("configs")
    p = root.joinpath(name if name.endswith(".json") else name + ".json")
    if not p.is_file():
        raise ConfigError(f"no shipped config named {name!r}; have {shipped_configs()}")
    return Path(str(p))


def resolve_config(ref):
    """A file path, or the name of a shipped config."""
    p = Path(ref)
    if p.is_file():
        return RunConfig.load(p)
    return RunConfig.load(shipped_config_path(ref))
