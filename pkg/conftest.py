"""Shared fixtures for the test suite."""

import os

import numpy as np
import pytest

from vertebra_locator.landmarks import DESK_LABELS
from vertebra_locator.synth import SpineModel
from vertebra_locator.volume import Volume3D


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running experiments, enabled with RUN_SLOW=1")


def pytest_collection_modifyitems(config, items):
    if os.environ.get("RUN_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="set RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def desk_template():
    """The default desk-scale grid: 16x16x48 voxels at 4 mm."""
    return Volume3D.zeros((16, 16, 48), (4.0, 4.0, 4.0))


@pytest.fixture
def desk_model():
    return SpineModel(labels=DESK_LABELS, seed=0)


@pytest.fixture
def quiet_model():
    """No perturbations at all: every sample is the nominal spine."""
    return SpineModel(
        labels=DESK_LABELS,
        jitter=0.0,
        spacing_jitter=0.0,
        curvature_jitter=0.0,
        shift_sigma=0.0,
        curvature=((0.0, 0.0, 0.0), (0.0, 0.0, 0.0)),
    )
