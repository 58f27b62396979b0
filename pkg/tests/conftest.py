from __future__ import annotations

import pytest

from opsmith.pgraph import ProblemSpec
from opsmith.symexpr import Variable, parse_size

CONV_STEPS = (
    "op{reduce(C_in); reduce(K); reduce(K); "
    "contract[0:weight,3:both,4:both,5:both]; unfold[1,7]; unfold[2,8]}"
)


def build_spec(name, primaries, coeffs, reference, output, input_, batch=(), **kw):
    variables = tuple(Variable(n) for n in primaries) + tuple(
        Variable(n, primary=False) for n in coeffs
    )
    var_map = {v.name: v for v in variables}
    return ProblemSpec(
        name=name,
        variables=variables,
        reference=tuple(reference.items()),
        output_dims=tuple(parse_size(t, var_map) for t in output),
        input_dims=tuple(parse_size(t, var_map) for t in input_),
        batch_dims=tuple(parse_size(t, var_map) for t in batch),
        **kw,
    )


def conv2d_spec(**kw):
    return build_spec(
        "conv2d",
        ("C_out", "C_in", "H", "W"),
        ("K",),
        {"C_out": 8, "C_in": 8, "H": 8, "W": 8, "K": 3},
        ("C_out", "H", "W"),
        ("C_in", "H", "W"),
        **kw,
    )


def vec1d_spec(**kw):
    """Smallest interesting space: one primary, one coefficient."""
    return build_spec("vecmap", ("N",), ("g",), {"N": 8, "g": 2}, ("N",), ("N",), **kw)


@pytest.fixture
def conv2d():
    return conv2d_spec()


@pytest.fixture
def vec1d():
    return vec1d_spec()


@pytest.fixture
def make_spec():
    return build_spec
