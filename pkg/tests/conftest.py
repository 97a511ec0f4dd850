import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from locolab.molrg import SubspaceModel, localized_model, random_model

settings.register_profile(
    "locolab", deadline=None, max_examples=40,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("locolab")


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def default_model():
    """The reference instance: d = 32, two rank-2 subspaces."""
    return random_model(32, [2, 2], seed=0)


@pytest.fixture
def axis_model():
    """K = 1, d = 4, M = [e1 e2]."""
    return SubspaceModel((np.eye(4)[:, :2],))


@pytest.fixture
def block_model():
    """d = 16, two rank-2 subspaces living on coordinates 0-7 and 8-15."""
    return localized_model(16, [2, 2], [range(0, 8), range(8, 16)], seed=3)
