import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("fhrtwin", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "fhrtwin"))


@pytest.fixture(scope="session")
def constants():
    from fhrtwin.constants import default_constants

    return default_constants()


@pytest.fixture(scope="session")
def original_net(constants):
    from fhrtwin.models import default_net

    return default_net("original", constants)


@pytest.fixture(scope="session")
def shock_net(constants):
    from fhrtwin.models import default_net

    return default_net("shock", constants)


@pytest.fixture(scope="session")
def full_state(constants):
    from fhrtwin.plant import steady_state

    return steady_state(1.0, constants=constants)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
