import numpy as np
import pytest

from branchlab.model import OffspringLaw, build_model
from branchlab.suite import get_model


@pytest.fixture
def single_poisson():
    return get_model("single_poisson")


@pytest.fixture
def two_cycle():
    return get_model("two_cycle_poisson")


@pytest.fixture
def deterministic():
    return get_model("deterministic")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def constant_model(offspring_vectors, immigration_vector, name="constant"):
    laws = [OffspringLaw.constant(v) for v in offspring_vectors]
    return build_model(laws, OffspringLaw.constant(immigration_vector), name=name)
