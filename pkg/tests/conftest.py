import numpy as np
import pytest

from glamor.env import make_env
from glamor.seqmodel import make_models
from glamor.seqmodel.oracle import fit_exact


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def grid7():
    return make_env("grid7")


@pytest.fixture(scope="session")
def die():
    return make_env("die")


@pytest.fixture(scope="session")
def die_models():
    """Tabular models loaded with the exact expected counts of uniform die data."""
    env = make_env("die")
    idm, prior = make_models("tabular", env.num_states, env.num_actions, 1)
    fit_exact(idm, prior, env, env.start_state, 1)
    return idm, prior


@pytest.fixture(scope="session")
def grid7_exact_models():
    """Exact uniform-policy models on grid7 for sequences of up to 3 steps."""
    env = make_env("grid7")
    idm, prior = make_models("tabular", env.num_states, env.num_actions, 3)
    fit_exact(idm, prior, env, env.start_state, 3)
    return idm, prior
