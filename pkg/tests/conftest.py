import numpy as np
import pytest


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long end-to-end runs")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
