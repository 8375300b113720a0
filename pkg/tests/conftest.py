"""Shared fixtures for the test suite."""

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cqec import model


@pytest.fixture(scope="session")
def params():
    """Default device parameters."""
    return model.load_params()


@pytest.fixture(scope="session")
def quiet_params(params):
    """No dissipation and no thermal excitation; measurement physics only."""
    return params.with_updates(t1_us=[1e9] * 3, t2_star_us=[1.9e9] * 3,
                               gamma_up_per_ms=[0.0] * 3)


@pytest.fixture(scope="session")
def data_dir():
    return Path(__file__).parent / "data"
