import numpy as np
import pytest

from oodmon import nn
from oodmon.fixtures import desk_fixture


@pytest.fixture(scope="session")
def desk():
    return desk_fixture(seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_mlp(seed, n_in=6, hidden=(8, 7, 5), classes=4, activation="relu"):
    return nn.mlp(n_in, list(hidden), classes, seed=seed, activation=activation)
