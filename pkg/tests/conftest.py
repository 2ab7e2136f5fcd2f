"""
pytest configuration and fixtures
"""

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from density_engine import clear_inverter_cache
from lattice import Lattice
from stable_model import StableSpec, axes_measure, isotropic_measure


@pytest.fixture(scope="session")
def cauchy_spec():
    """d=1, alpha=1, psi(u) = |u|"""
    return StableSpec.from_measure(1.0, isotropic_measure(1))


@pytest.fixture(scope="session")
def spec_15():
    return StableSpec.from_measure(1.5, isotropic_measure(1))


@pytest.fixture(scope="session")
def axes_spec_2d():
    return StableSpec.from_measure(1.2, axes_measure(2))


@pytest.fixture
def line_box():
    return Lattice.cube(1, 6.0, 0.05)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session", autouse=True)
def release_inverters():
    """Drop cached Fourier inverters after the session"""
    yield
    clear_inverter_cache()


def pytest_configure(config):
    """Configure pytest"""
    config.addinivalue_line(
        "markers", "slow: marks tests as slow (deselect with '-m \"not slow\"')"
    )
    config.addinivalue_line(
        "markers", "integration: marks tests as integration tests"
    )
