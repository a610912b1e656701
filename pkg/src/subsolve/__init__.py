"""Numerical quasimode construction for operators of subprincipal type."""

__version__ = "0.1.0"
