import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from data import SynthConfig, generate_phantom  # noqa: E402
from network import NetworkConfig  # noqa: E402


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run desk-scale experiments")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale experiment, needs --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_config():
    """Network for 16^3 inputs."""
    return NetworkConfig(in_shape=(16, 16, 16))


@pytest.fixture
def phantom32():
    return generate_phantom(SynthConfig(shape=(32, 32, 32), max_displacement=4.0, seed=3))
