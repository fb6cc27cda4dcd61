import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sharpdro.autodiff import ModelSpec
from sharpdro.datagen import CorruptedDataset

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def make_dataset(n=60, dim=3, classes=3, max_severity=2, seed=0):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % classes
    X = rng.normal(size=(n, dim)) + 2.0 * np.eye(classes, dim)[y]
    severity = np.arange(n) % (max_severity + 1)
    return CorruptedDataset(X, y, severity, classes, max_severity)


@pytest.fixture
def small_data():
    return make_dataset()


@pytest.fixture
def small_model():
    return ModelSpec(3, 3, (4,), "tanh")
