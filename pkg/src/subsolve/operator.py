"""Normal-form operators ``D_t + F`` described by symbol fields."""

from __future__ import annotations

from dataclasses import dataclass, field

from .dsl import Dims, SymbolFn, free_vars, parse_expr, to_string


@dataclass(frozen=True)
class LowerOrderTerm:
    """``coef(t, x, y) * D_t^l D_x^nu D_y^mu`` contributing at order ``j``."""

    j: int
    coef: SymbolFn
    dt: int = 0
    dx: tuple = ()
    dy: tuple = ()

    @property
    def total_order(self):
        return self.dt + sum(self.dx) + sum(self.dy)


@dataclass(frozen=True)
class NormalFormOperator:
    dims: Dims
    f: SymbolFn
    A: tuple
    B: tuple
    R0: SymbolFn
    R: tuple = field(default_factory=tuple)
    name: str = ""

    def __post_init__(self):
        d = self.dims
        if not self.f.real:
            raise ValueError("f must carry the realness flag")
        if free_vars(self.f.expr) - set(("t",) + d.x + d.xi):
            raise ValueError("f may depend on t, x and xi only")
        if len(self.A) != d.n_y:
            raise ValueError(f"A needs {d.n_y} entries")
        if len(self.B) != d.n_y or any(len(row) != d.n_y for row in self.B):
            raise ValueError(f"B must be {d.n_y}x{d.n_y}")
        for i in range(d.n_y):
            for k in range(i + 1, d.n_y):
                if self.B[i][k].expr != self.B[k][i].expr:
                    raise ValueError(f"B is not symmetric at ({i + 1},{k + 1})")
        for term in self.R:
            if term.total_order > term.j + 2:
                raise ValueError(
                    f"R_{term.j} term has total order {term.total_order} > {term.j + 2}")
            if len(term.dx) != d.n_x or len(term.dy) != d.n_y:
                raise ValueError("R term orders must match n_x and n_y")

    @classmethod
    def from_dict(cls, spec):
        dims = Dims(int(spec.get("n_x", 1)), int(spec.get("n_y", 1)))
        allv = dims.variables
        f = SymbolFn(parse_expr(str(spec["f"]), ("t",) + dims.x + dims.xi), allv,
                     real=True, name="f")
        A_raw = spec.get("A", ["0"] * dims.n_y)
        A = tuple(SymbolFn(str(a), allv, name=f"A{i + 1}") for i, a in enumerate(A_raw))
        B_raw = spec.get("B", [["1" if i == k else "0" for k in range(dims.n_y)]
                               for i in range(dims.n_y)])
        B = tuple(tuple(SymbolFn(str(b), allv, name=f"B{i + 1}{k + 1}")
                        for k, b in enumerate(row)) for i, row in enumerate(B_raw))
        R0 = SymbolFn(str(spec.get("R0", "0")), allv, name="R0")
        terms = []
        for item in spec.get("R", []):
            terms.append(LowerOrderTerm(
                j=int(item["j"]),
                coef=SymbolFn(str(item["coef"]), ("t",) + dims.x + dims.y),
                dt=int(item.get("dt", 0)),
                dx=tuple(item.get("dx", [0] * dims.n_x)),
                dy=tuple(item.get("dy", [0] * dims.n_y))))
        return cls(dims, f, A, B, R0, tuple(terms), name=str(spec.get("name", "")))

    def to_dict(self):
        return {
            "name": self.name,
            "n_x": self.dims.n_x,
            "n_y": self.dims.n_y,
            "f": self.f.text,
            "A": [a.text for a in self.A],
            "B": [[b.text for b in row] for row in self.B],
            "R0": self.R0.text,
            "R": [{"j": r.j, "coef": r.coef.text, "dt": r.dt, "dx": list(r.dx),
                   "dy": list(r.dy)} for r in self.R],
        }

    def fields(self):
        yield self.f
        yield from self.A
        for row in self.B:
            yield from row
        yield self.R0

    def is_chart_local(self, samples=16, seed=0):
        """True when some field fails a sampled homogeneity check in the fibre.

        Expected degrees: 1 for ``f``; 0 for ``A``, ``B`` and ``R0``.  The check
        is only reported, never enforced.
        """
        import numpy as np

        d = self.dims
        rng = np.random.default_rng(seed)
        fibre = ("tau",) + d.xi + d.eta
        pts = {v: rng.uniform(-0.5, 0.5, samples) for v in d.variables}
        for v in fibre:
            pts[v] = rng.uniform(0.5, 1.5, samples) * rng.choice([-1, 1], samples)
        scaled = dict(pts)
        for v in fibre:
            scaled[v] = 2.0 * pts[v]
        for s in self.fields():
            deg = 1 if s is self.f else 0
            try:
                a = np.asarray(s.evaluate(pts), dtype=float)
                b = np.asarray(s.evaluate(scaled), dtype=float)
            except ArithmeticError:
                return True
            if not np.allclose(b, 2.0 ** deg * a, rtol=1e-9, atol=1e-12):
                return True
        return False

    def describe(self):
        return {k: v for k, v in self.to_dict().items() if k != "R"} | {
            "R_terms": len(self.R), "chart_local": self.is_chart_local()}


def expr_text(s):
    return to_string(s.expr) if isinstance(s, SymbolFn) else to_string(s)
