import numpy as np
import pytest

from lutimlp.lattice import Lattice3
from lutimlp.mlp import Mlp, tabulate


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_mlp(rng):
    return Mlp.init((3, 16, 16, 8), rng)


@pytest.fixture
def trained_like_lut(rng):
    """Table from a random relu network; stands in for a trained embedding."""
    mlp = Mlp.init((3, 32, 32, 16), rng)
    return mlp, tabulate(mlp, Lattice3(8))


def tabulate_fn(fn, lattice, dtype=np.float64):
    """Table whose node values come from a plain function of the node coords."""
    from lutimlp.lattice import Lut

    vals = np.asarray(fn(lattice.all_nodes()), dtype=dtype)
    if vals.ndim == 1:
        vals = vals[:, None]
    return Lut(lattice, vals)
