"""Exception types shared across the package (mapped to CLI exit codes)."""


class SubsolveError(Exception):
    exit_code = 1


class ConfigError(SubsolveError, ValueError):
    exit_code = 4


class NumericalError(SubsolveError, ArithmeticError):
    exit_code = 3


class PositivityLost(NumericalError):
    def __init__(self, t, eig):
        super().__init__(f"positivity lost at t={t:.6g} (min eig Im w2 = {eig:.3g})")
        self.t = t
        self.eig = eig


class ResolutionError(NumericalError):
    pass


class RejectedConfiguration(SubsolveError):
    exit_code = 2


class ExactUnavailable(NumericalError):
    def __init__(self, detail=""):
        msg = "exact application unavailable; use expansion"
        super().__init__(f"{msg} ({detail})" if detail else msg)
