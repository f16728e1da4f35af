"""Shared pytest fixtures for the crnsa test suite."""

import numpy as np
import pytest
from click.testing import CliRunner

from crnsa.prng import ReplicationStreams
from crnsa.problems import (
    atomflat_family_problem,
    deterministic_problem,
    normal_location_problem,
    tent_mixture_problem,
    triangular_problem,
    uniform_mixture_problem,
)


# Core Infrastructure Fixtures

@pytest.fixture
def cli_runner():
    """Provides a Click CLI test runner."""
    return CliRunner()


@pytest.fixture(autouse=True)
def isolated_cache(tmp_path, monkeypatch):
    """Points the calibration cache at a per-test directory and clears the seed variable."""
    monkeypatch.setenv("CRNSA_CACHE_DIR", str(tmp_path / "cache"))
    monkeypatch.delenv("SA_CRN_SEED", raising=False)
    return tmp_path / "cache"


@pytest.fixture
def streams():
    """Provides the substreams of replications 0..63 under master seed 7."""
    return ReplicationStreams.derive(7, np.arange(64))


# Problem Fixtures

@pytest.fixture
def triangular():
    """Triangular-mode problem with θ* = 0.6."""
    return triangular_problem()


@pytest.fixture
def triangular_exact():
    """Zero-noise triangular problem."""
    return deterministic_problem(triangular_problem())


@pytest.fixture
def normal2():
    """Normal location problem with quadratic loss."""
    return normal_location_problem(0.0, 2)


@pytest.fixture
def normal4():
    """Normal location problem with quartic loss."""
    return normal_location_problem(0.0, 4)


@pytest.fixture
def atomflat():
    """AtomFlat problem with a θ-dependent flat."""
    return atomflat_family_problem()


@pytest.fixture
def mixture():
    """Two-component uniform mixture problem."""
    return uniform_mixture_problem()


@pytest.fixture
def mixture_tent():
    """Three-component mixture problem with θ* = ½."""
    return tent_mixture_problem()


# Config Fixtures

@pytest.fixture
def sample_config_toml():
    """Provides a TOML experiment config."""
    return """
[experiment]
problem = "triangular"
scheme = "one"
coupling = "ind"

[schedule]
a = 4.0
eta = 0.25

[run]
reps = 60
seed = 11
"""


@pytest.fixture
def sample_config_yaml():
    """Provides a YAML experiment config."""
    return """
problem: normal2
method: inv
alpha: 0.75
n: 500
"""
