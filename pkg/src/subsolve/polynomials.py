"""Truncated multivariate polynomials with batched coefficients.

A polynomial in ``n`` variables truncated at total degree ``K`` is stored as
an array of shape ``(..., M)`` holding monomial coefficients, ordered as in
:class:`MultiIndexTable`.  Leading axes are batch axes (typically time nodes).
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

from .dsl import multi_indices


class MultiIndexTable:
    """Graded list of multi-indices over ``n`` slots with ``lo <= |a| <= K``."""

    def __init__(self, n, K, lo=0):
        self.n = n
        self.K = K
        self.lo = lo
        self.alphas = multi_indices(n, K, lo)
        self.index = {a: i for i, a in enumerate(self.alphas)}
        self.orders = np.array([sum(a) for a in self.alphas], dtype=int)
        self.factorials = np.array(
            [math.prod(math.factorial(k) for k in a) for a in self.alphas], dtype=float)

    def __len__(self):
        return len(self.alphas)

    def __iter__(self):
        return iter(self.alphas)

    def __contains__(self, alpha):
        return tuple(alpha) in self.index

    def neighbor(self, alpha, j, step=1):
        """Index of ``alpha + step*e_j`` or ``None`` when it leaves the table."""
        beta = list(alpha)
        beta[j] += step
        if beta[j] < 0:
            return None
        return self.index.get(tuple(beta))

    def unit(self, j):
        e = [0] * self.n
        e[j] = 1
        return tuple(e)


@lru_cache(maxsize=None)
def table(n, K):
    return MultiIndexTable(n, K, 0)


@lru_cache(maxsize=None)
def _product_plan(n, K):
    tab = table(n, K)
    I, J, T = [], [], []
    for i, a in enumerate(tab.alphas):
        for j, b in enumerate(tab.alphas):
            if sum(a) + sum(b) <= K:
                I.append(i)
                J.append(j)
                T.append(tab.index[tuple(x + y for x, y in zip(a, b))])
    S = np.zeros((len(I), len(tab)))
    S[np.arange(len(I)), T] = 1.0
    return np.array(I), np.array(J), S


def pmul(a, b, n, K):
    """Product of two truncated polynomials (coefficient arrays)."""
    I, J, S = _product_plan(n, K)
    return (a[..., I] * b[..., J]) @ S


def const(c, n, K):
    c = np.asarray(c)
    out = np.zeros(c.shape + (len(table(n, K)),), dtype=np.result_type(c, float))
    out[..., 0] = c
    return out


def variable(j, n, K, shape=()):
    tab = table(n, K)
    out = np.zeros(tuple(shape) + (len(tab),))
    if K >= 1:
        out[..., tab.index[tab.unit(j)]] = 1.0
    return out


def powers(p, m, n, K):
    """``[p^0, ..., p^m]`` as truncated polynomials."""
    out = [const(np.ones(p.shape[:-1]), n, K).astype(p.dtype)]
    for _ in range(m):
        out.append(pmul(out[-1], p, n, K))
    return out


def monomial_products(polys, m, n, K):
    """All products ``prod_j polys[j]^{g_j}`` with ``|g| <= m``, keyed by ``g``."""
    pw = [powers(p, m, n, K) for p in polys]
    out = {}
    for g in multi_indices(len(polys), m):
        acc = None
        for j, gj in enumerate(g):
            if gj:
                acc = pw[j][gj] if acc is None else pmul(acc, pw[j][gj], n, K)
        if acc is None:
            acc = pw[0][0]
        out[g] = acc
    return out


def evaluate(coef, z, n, K):
    """Evaluate at points ``z`` of shape ``(..., n)``; batch axes broadcast."""
    tab = table(n, K)
    z = np.asarray(z)
    mon = np.ones(z.shape[:-1] + (len(tab),), dtype=z.dtype)
    for i, a in enumerate(tab.alphas):
        for j, k in enumerate(a):
            if k:
                mon[..., i] = mon[..., i] * z[..., j] ** k
    return np.sum(coef * mon, axis=-1)
