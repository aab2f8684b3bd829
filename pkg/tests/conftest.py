import numpy as np
import pytest

from midisent import tensor as T
from midisent.model import CategoricalQ, GaussianQ


def set_params(module, **arrays):
    """Overwrite named parameters in place, e.g. set_params(q, **{"trunk.W": ...})."""
    named = dict(module.named_parameters())
    for name, value in arrays.items():
        key = name.replace("__", ".")
        named[key].data[...] = np.asarray(value, dtype=np.float64)


def identity_gaussian_q():
    """1-D q1 with mu(x) = x and unit variance: trunk splits x into relu(x), relu(-x)."""
    q = GaussianQ(1, 2, np.random.default_rng(0))
    set_params(q, **{"trunk.W": [[1.0], [-1.0]], "trunk.b": [0.0, 0.0],
                     "mu.W": [[1.0, -1.0]], "mu.b": [0.0],
                     "logvar.W": [[0.0, 0.0]], "logvar.b": [0.0]})
    return q


def blind_gaussian_q(dim=3, seed=0):
    """q1 whose mean and variance ignore the conditioning input."""
    q = GaussianQ(dim, 8, np.random.default_rng(seed))
    q.trunk.params["W"].data[...] = 0.0
    q.trunk.params["b"].data[...] = np.random.default_rng(seed + 1).uniform(0.1, 1.0, 8)
    return q


def blind_categorical_q(dim=3, classes=4, seed=0):
    q = CategoricalQ(dim, 8, classes, np.random.default_rng(seed))
    q.fc1.params["W"].data[...] = 0.0
    q.fc1.params["b"].data[...] = 1.0
    return q


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _grad_mode():
    assert T._grad_enabled
    yield
    assert T._grad_enabled
