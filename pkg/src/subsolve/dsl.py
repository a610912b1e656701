"""Expression language for symbol fields.

Expressions are small immutable trees over the chart variables
``t, x1.., y1.., tau, xi1.., eta1..``.  They support exact symbolic
differentiation and vectorised evaluation at real points.

Grammar (lowest to highest precedence)::

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := '-' unary | power
    power  := atom (('^' | '**') ['-'] INT)?
    atom   := NUMBER | NAME | NAME '(' args ')' | '(' expr ')'

Functions: ``exp sin cos sqrt flat oddflat flatk``.  ``flat(u)`` is
``exp(-1/|u|)`` with ``flat(0) = 0``, ``oddflat(u) = sign(u) flat(u)`` and
``flatk(m, p, u) = sign(u)^p |u|^-m exp(-1/|u|)``; the last one closes the
family under differentiation.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

__all__ = [
    "Dims", "Expr", "Const", "Var", "Add", "Sub", "Mul", "Div", "Pow", "Neg",
    "Func", "Flat", "DSLSyntaxError", "UnknownVariableError", "DomainError",
    "parse_expr", "to_string", "diff_expr", "free_vars", "compile_expr",
    "SymbolFn", "is_zero",
]


class DSLSyntaxError(ValueError):
    def __init__(self, message, pos):
        super().__init__(f"{message} at offset {pos}")
        self.pos = pos


class UnknownVariableError(ValueError):
    pass


class DomainError(ArithmeticError):
    """Evaluation hit a pole of ``/``, a negative ``sqrt`` argument, or similar."""


@dataclass(frozen=True)
class Dims:
    n_x: int
    n_y: int

    def __post_init__(self):
        if self.n_x < 1 or self.n_y < 1:
            raise ValueError("n_x and n_y must be >= 1")

    @property
    def x(self):
        return tuple(f"x{i + 1}" for i in range(self.n_x))

    @property
    def y(self):
        return tuple(f"y{i + 1}" for i in range(self.n_y))

    @property
    def xi(self):
        return tuple(f"xi{i + 1}" for i in range(self.n_x))

    @property
    def eta(self):
        return tuple(f"eta{i + 1}" for i in range(self.n_y))

    @property
    def variables(self):
        return ("t",) + self.x + self.y + ("tau",) + self.xi + self.eta

    @property
    def n(self):
        """Base dimension ``1 + n_x + n_y``."""
        return 1 + self.n_x + self.n_y


# --------------------------------------------------------------------------
# nodes


class Expr:
    __slots__ = ("_key", "_hash", "_free")

    def __init__(self, *key):
        object.__setattr__(self, "_key", key)
        object.__setattr__(self, "_hash", hash((type(self).__name__,) + key))
        object.__setattr__(self, "_free", None)

    def __setattr__(self, name, value):
        raise AttributeError("expressions are immutable")

    def __eq__(self, other):
        return type(self) is type(other) and self._key == other._key

    def __hash__(self):
        return self._hash

    def __repr__(self):
        args = ", ".join(repr(k) for k in self._key)
        return f"{type(self).__name__}({args})"

    def __str__(self):
        return to_string(self)


class Const(Expr):
    __slots__ = ()

    def __init__(self, value):
        super().__init__(float(value))

    @property
    def value(self):
        return self._key[0]


class Var(Expr):
    __slots__ = ()

    def __init__(self, name):
        super().__init__(str(name))

    @property
    def name(self):
        return self._key[0]


class _Binary(Expr):
    __slots__ = ()

    def __init__(self, left, right):
        super().__init__(left, right)

    @property
    def left(self):
        return self._key[0]

    @property
    def right(self):
        return self._key[1]


class Add(_Binary):
    __slots__ = ()


class Sub(_Binary):
    __slots__ = ()


class Mul(_Binary):
    __slots__ = ()


class Div(_Binary):
    __slots__ = ()


class Pow(Expr):
    __slots__ = ()

    def __init__(self, base, exponent):
        if int(exponent) != exponent:
            raise ValueError("pow exponents must be integers")
        super().__init__(base, int(exponent))

    @property
    def base(self):
        return self._key[0]

    @property
    def exponent(self):
        return self._key[1]


class Neg(Expr):
    __slots__ = ()

    def __init__(self, arg):
        super().__init__(arg)

    @property
    def arg(self):
        return self._key[0]


FUNCTIONS = ("exp", "sin", "cos", "sqrt")


class Func(Expr):
    __slots__ = ()

    def __init__(self, name, arg):
        if name not in FUNCTIONS:
            raise ValueError(f"unknown function {name!r}")
        super().__init__(name, arg)

    @property
    def name(self):
        return self._key[0]

    @property
    def arg(self):
        return self._key[1]


class Flat(Expr):
    """``sign(u)^parity * |u|^-m * exp(-1/|u|)``, zero at ``u = 0``."""

    __slots__ = ()

    def __init__(self, m, parity, arg):
        super().__init__(int(m), int(parity) % 2, arg)

    @property
    def m(self):
        return self._key[0]

    @property
    def parity(self):
        return self._key[1]

    @property
    def arg(self):
        return self._key[2]


ZERO = Const(0.0)
ONE = Const(1.0)


def is_zero(e):
    return isinstance(e, Const) and e.value == 0.0


def _children(e):
    if isinstance(e, _Binary):
        return (e.left, e.right)
    if isinstance(e, (Neg, Func, Flat)):
        return (e.arg,)
    if isinstance(e, Pow):
        return (e.base,)
    return ()


def free_vars(e):
    if e._free is None:
        if isinstance(e, Var):
            fv = frozenset((e.name,))
        else:
            fv = frozenset().union(*(free_vars(c) for c in _children(e)))
        object.__setattr__(e, "_free", fv)
    return e._free


# --------------------------------------------------------------------------
# folding constructors used by differentiation


def add(a, b):
    if is_zero(a):
        return b
    if is_zero(b):
        return a
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value + b.value)
    return Add(a, b)


def sub(a, b):
    if is_zero(b):
        return a
    if is_zero(a):
        return neg(b)
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value - b.value)
    return Sub(a, b)


def mul(a, b):
    if is_zero(a) or is_zero(b):
        return ZERO
    if a == ONE:
        return b
    if b == ONE:
        return a
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value * b.value)
    return Mul(a, b)


def div(a, b):
    if is_zero(a):
        return ZERO
    if b == ONE:
        return a
    if isinstance(a, Const) and isinstance(b, Const) and b.value != 0.0:
        return Const(a.value / b.value)
    return Div(a, b)


def neg(a):
    if isinstance(a, Const):
        return Const(-a.value)
    if isinstance(a, Neg):
        return a.arg
    return Neg(a)


def power(a, n):
    if n == 0:
        return ONE
    if n == 1:
        return a
    if isinstance(a, Const) and (a.value != 0.0 or n > 0):
        return Const(a.value ** n)
    return Pow(a, n)


# --------------------------------------------------------------------------
# parsing

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_]\w*)"
    r"|(?P<op>\*\*|[-+*/^(),]))"
)


def _tokenize(text):
    tokens = []
    pos = 0
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if not m:
            start = pos + len(text[pos:]) - len(text[pos:].lstrip())
            raise DSLSyntaxError(f"unexpected character {text[start]!r}", start)
        kind = m.lastgroup
        start = m.start(kind)
        tokens.append((kind, m.group(kind), start))
        pos = m.end()
    tokens.append(("eof", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text, variables):
        self.tokens = _tokenize(text)
        self.i = 0
        self.variables = variables

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value):
        tok = self.take()
        if tok[1] != value:
            raise DSLSyntaxError(f"expected {value!r}", tok[2])
        return tok

    def parse(self):
        e = self.expr()
        tok = self.peek()
        if tok[0] != "eof":
            raise DSLSyntaxError(f"unexpected {tok[1]!r}", tok[2])
        return e

    def expr(self):
        e = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            rhs = self.term()
            e = Add(e, rhs) if op == "+" else Sub(e, rhs)
        return e

    def term(self):
        e = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            rhs = self.unary()
            e = Mul(e, rhs) if op == "*" else Div(e, rhs)
        return e

    def unary(self):
        if self.peek()[1] == "-" and self.peek()[0] == "op":
            self.take()
            return Neg(self.unary())
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek()[1] in ("^", "**"):
            self.take()
            sign = 1
            if self.peek()[1] == "-":
                self.take()
                sign = -1
            tok = self.take()
            if tok[0] != "num" or not re.fullmatch(r"\d+", tok[1]):
                raise DSLSyntaxError("pow exponent must be an integer literal", tok[2])
            return Pow(base, sign * int(tok[1]))
        return base

    def _int_arg(self):
        tok = self.take()
        if tok[0] != "num" or not re.fullmatch(r"\d+", tok[1]):
            raise DSLSyntaxError("expected integer literal", tok[2])
        return int(tok[1])

    def atom(self):
        kind, value, pos = self.take()
        if kind == "num":
            return Const(float(value))
        if kind == "name":
            if self.peek()[1] == "(":
                self.take()
                if value == "flatk":
                    m = self._int_arg()
                    self.expect(",")
                    p = self._int_arg()
                    self.expect(",")
                    arg = self.expr()
                    self.expect(")")
                    return Flat(m, p, arg)
                arg = self.expr()
                self.expect(")")
                if value == "flat":
                    return Flat(0, 0, arg)
                if value == "oddflat":
                    return Flat(0, 1, arg)
                if value in FUNCTIONS:
                    return Func(value, arg)
                raise DSLSyntaxError(f"unknown function {value!r}", pos)
            if self.variables is not None and value not in self.variables:
                raise UnknownVariableError(
                    f"unknown variable {value!r} at offset {pos}; declared: "
                    + ", ".join(self.variables))
            return Var(value)
        if value == "(":
            e = self.expr()
            self.expect(")")
            return e
        if kind == "eof":
            raise DSLSyntaxError("unexpected end of input", pos)
        raise DSLSyntaxError(f"unexpected {value!r}", pos)


def parse_expr(text, dims=None):
    """Parse ``text``; ``dims`` (a :class:`Dims` or a name list) restricts variables."""
    if not text or not text.strip():
        raise DSLSyntaxError("empty expression", 0)
    if isinstance(dims, Dims):
        variables = dims.variables
    else:
        variables = None if dims is None else tuple(dims)
    return _Parser(text, variables).parse()


# --------------------------------------------------------------------------
# printing

_PREC = {Add: 1, Sub: 1, Mul: 2, Div: 2, Neg: 3, Pow: 4}


def _prec(e):
    if isinstance(e, Const) and e.value < 0:
        return 0
    return _PREC.get(type(e), 5)


def _fmt_const(v):
    if v == int(v) and abs(v) < 1e15:
        s = f"{int(v)}"
    else:
        s = repr(v)
    return f"({s})" if v < 0 else s


def to_string(e):
    """Canonical printer; ``parse_expr(to_string(e)) == e`` for parsed trees."""
    if isinstance(e, Const):
        return _fmt_const(e.value)
    if isinstance(e, Var):
        return e.name
    if isinstance(e, _Binary):
        p = _PREC[type(e)]
        op = {Add: " + ", Sub: " - ", Mul: "*", Div: "/"}[type(e)]
        left = to_string(e.left)
        if _prec(e.left) < p:
            left = f"({left})"
        right = to_string(e.right)
        if _prec(e.right) <= p:
            right = f"({right})"
        return left + op + right
    if isinstance(e, Neg):
        inner = to_string(e.arg)
        if _prec(e.arg) < 3:
            inner = f"({inner})"
        return "-" + inner
    if isinstance(e, Pow):
        base = to_string(e.base)
        if _prec(e.base) <= 4:
            base = f"({base})"
        return f"{base}^{e.exponent}"
    if isinstance(e, Func):
        return f"{e.name}({to_string(e.arg)})"
    if isinstance(e, Flat):
        if e.m == 0 and e.parity == 0:
            return f"flat({to_string(e.arg)})"
        if e.m == 0 and e.parity == 1:
            return f"oddflat({to_string(e.arg)})"
        return f"flatk({e.m}, {e.parity}, {to_string(e.arg)})"
    raise TypeError(e)


# --------------------------------------------------------------------------
# differentiation


@lru_cache(maxsize=65536)
def diff_expr(e, v):
    """Exact derivative of ``e`` with respect to variable name ``v``."""
    if v not in free_vars(e):
        return ZERO
    if isinstance(e, Var):
        return ONE
    if isinstance(e, Add):
        return add(diff_expr(e.left, v), diff_expr(e.right, v))
    if isinstance(e, Sub):
        return sub(diff_expr(e.left, v), diff_expr(e.right, v))
    if isinstance(e, Mul):
        return add(mul(diff_expr(e.left, v), e.right), mul(e.left, diff_expr(e.right, v)))
    if isinstance(e, Div):
        da, db = diff_expr(e.left, v), diff_expr(e.right, v)
        num = sub(mul(da, e.right), mul(e.left, db))
        return div(num, power(e.right, 2))
    if isinstance(e, Neg):
        return neg(diff_expr(e.arg, v))
    if isinstance(e, Pow):
        n = e.exponent
        return mul(mul(Const(n), power(e.base, n - 1)), diff_expr(e.base, v))
    du = diff_expr(e.arg, v)
    if isinstance(e, Func):
        u = e.arg
        if e.name == "exp":
            outer = e
        elif e.name == "sin":
            outer = Func("cos", u)
        elif e.name == "cos":
            outer = neg(Func("sin", u))
        else:
            outer = div(Const(0.5), e)
        return mul(outer, du)
    if isinstance(e, Flat):
        # d/du s^p g(|u|) = s^(p+1) g'(|u|),  g(r) = r^-m e^(-1/r)
        p1 = (e.parity + 1) % 2
        outer = Flat(e.m + 2, p1, e.arg)
        if e.m:
            outer = sub(outer, mul(Const(e.m), Flat(e.m + 1, p1, e.arg)))
        return mul(outer, du)
    raise TypeError(e)


# --------------------------------------------------------------------------
# evaluation


def _flat_value(m, parity, u):
    u = np.asarray(u, dtype=float)
    a = np.abs(u)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        val = np.exp(-1.0 / a - m * np.log(a))
    val = np.where(a == 0.0, 0.0, val)
    if parity:
        val = val * np.sign(u)
    return val


def _compile(e):
    if isinstance(e, Const):
        c = e.value
        return lambda env: c
    if isinstance(e, Var):
        name = e.name
        return lambda env: env[name]
    if isinstance(e, _Binary):
        fa, fb = _compile(e.left), _compile(e.right)
        if isinstance(e, Add):
            return lambda env: fa(env) + fb(env)
        if isinstance(e, Sub):
            return lambda env: fa(env) - fb(env)
        if isinstance(e, Mul):
            return lambda env: fa(env) * fb(env)

        def _div(env):
            den = fb(env)
            if np.any(np.asarray(den) == 0.0):
                raise DomainError(f"division by zero in {to_string(e)}")
            return fa(env) / den
        return _div
    if isinstance(e, Neg):
        fa = _compile(e.arg)
        return lambda env: -fa(env)
    if isinstance(e, Pow):
        fa, n = _compile(e.base), e.exponent
        if n >= 0:
            return lambda env: fa(env) ** n

        def _negpow(env):
            b = np.asarray(fa(env), dtype=float)
            if np.any(b == 0.0):
                raise DomainError(f"zero base with negative exponent in {to_string(e)}")
            return b ** n
        return _negpow
    if isinstance(e, Func):
        fa = _compile(e.arg)
        if e.name == "sqrt":
            def _sqrt(env):
                a = fa(env)
                if np.any(np.asarray(a) < 0.0):
                    raise DomainError(f"negative argument in {to_string(e)}")
                return np.sqrt(a)
            return _sqrt
        fn = {"exp": np.exp, "sin": np.sin, "cos": np.cos}[e.name]
        return lambda env: fn(fa(env))
    if isinstance(e, Flat):
        fa, m, p = _compile(e.arg), e.m, e.parity
        return lambda env: _flat_value(m, p, fa(env))
    raise TypeError(e)


@lru_cache(maxsize=65536)
def compile_expr(e):
    """Return ``env -> value`` for a mapping of variable names to floats/arrays."""
    return _compile(e)


class SymbolFn:
    """A scalar symbol field with exact derivative oracle.

    ``realness`` marks fields that must be real at real points (``f``).
    """

    max_order = 8

    def __init__(self, expr, variables, real=False, name=None):
        if isinstance(expr, str):
            expr = parse_expr(expr, variables)
        self.expr = expr
        self.variables = tuple(variables)
        self.real = real
        self.name = name
        missing = free_vars(expr) - set(self.variables)
        if missing:
            raise UnknownVariableError(f"undeclared variables {sorted(missing)}")

    def __repr__(self):
        return f"SymbolFn({to_string(self.expr)!r})"

    @property
    def text(self):
        return to_string(self.expr)

    def depends_on(self, names):
        return bool(free_vars(self.expr) & set(names))

    def partial(self, orders):
        """Exact derivative expression; ``orders`` maps variable name to order."""
        e = self.expr
        for v, k in sorted(orders.items()):
            for _ in range(k):
                e = diff_expr(e, v)
        return e

    def partial_fn(self, orders):
        return compile_expr(self.partial(orders))

    def __call__(self, env):
        return self.evaluate(env)

    def evaluate(self, env, orders=None):
        """Evaluate (a derivative of) the field; missing variables count as 0."""
        e = self.expr if not orders else self.partial(orders)
        full = {v: env.get(v, 0.0) for v in free_vars(e)}
        with np.errstate(all="ignore"):
            val = compile_expr(e)(full)
        if isinstance(val, float):
            return val
        shape = np.broadcast(*[np.asarray(x) for x in env.values()]).shape if env else ()
        val = np.asarray(val)
        dtype = complex if np.iscomplexobj(val) else float
        return np.broadcast_to(val.astype(dtype), shape) + 0.0

    def jet(self, point, order, wrt=None):
        """All partials of order ``<= order`` in the ``wrt`` variables at ``point``.

        Returns a dict from multi-index (tuple aligned with ``wrt``) to complex value.
        """
        if order > self.max_order:
            raise ValueError(f"jet order {order} exceeds maximum {self.max_order}")
        wrt = tuple(wrt or self.variables)
        key = (tuple(sorted((k, float(v)) for k, v in point.items())), order, wrt)
        cache = self.__dict__.setdefault("_jet_cache", {})
        if key in cache:
            return dict(cache[key])
        out = {}
        for alpha in multi_indices(len(wrt), order):
            orders = {v: a for v, a in zip(wrt, alpha) if a}
            out[alpha] = complex(self.evaluate(point, orders))
        cache[key] = out
        return dict(out)


def multi_indices(n, max_order, min_order=0):
    """All multi-indices over ``n`` slots with ``min_order <= |a| <= max_order``, graded."""
    out = []
    for total in range(min_order, max_order + 1):
        out.extend(_compositions(n, total))
    return out


def _compositions(n, total):
    if n == 1:
        return [(total,)]
    res = []
    for first in range(total, -1, -1):
        for rest in _compositions(n - 1, total - first):
            res.append((first,) + rest)
    return res


def factorial_multi(alpha):
    return math.prod(math.factorial(a) for a in alpha)
