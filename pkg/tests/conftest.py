import warnings

import numpy as np
import pytest

from cbdm.schedule import build_schedule


@pytest.fixture(scope="session")
def schedule():
    return build_schedule(200, 1e-4, 0.02)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_configure(config):
    warnings.filterwarnings("ignore", message="tau\\*T")
