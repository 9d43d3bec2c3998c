import numpy as np
import pytest

import jamlab as jl


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)


@pytest.fixture(params=["ball", "box", "poly"])
def any_solid(request):
    if request.param == "ball":
        return jl.ball(2, 0.2)
    if request.param == "box":
        return jl.box([0.2, 0.15])
    return jl.symmetric_polygon(
        [[0.2, 0.0], [0.1, 0.15], [-0.1, 0.15], [-0.2, 0.0], [-0.1, -0.15], [0.1, -0.15]])


def unit_interval():
    """The d=1 solid [-1/2, 1/2]."""
    return jl.box([0.5])
