import warnings

import pytest

from subsolve.operator import NormalFormOperator


def make_op(f, A=("0",), B=(("1",),), R0="0", n_x=1, n_y=1, R=None):
    spec = {"n_x": n_x, "n_y": n_y, "f": f, "A": list(A), "B": [list(r) for r in B], "R0": R0}
    if R:
        spec["R"] = R
    return NormalFormOperator.from_dict(spec)


@pytest.fixture(autouse=True)
def _quiet():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        yield
