from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from drlab.config import ExperimentConfig

settings.register_profile("drlab", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("drlab")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_config() -> ExperimentConfig:
    """Case-study world on a short horizon."""
    return ExperimentConfig().with_overrides(run={"horizon": 400, "reps": 3, "seed": 11})


@pytest.fixture(scope="session")
def direct_config() -> ExperimentConfig:
    """A small direct-mode world with uniform aggregate shocks."""
    return ExperimentConfig().with_overrides(
        model={"kind": "direct", "a": 2.0, "b": 1.0, "shock": "uniform", "shock_bound": 0.5},
        box={"a_lo": 1.0, "a_hi": 3.0, "b_hi": 2.0},
        cost={"wholesale": 3.17},
        run={"horizon": 600, "reps": 3, "seed": 5},
    )
