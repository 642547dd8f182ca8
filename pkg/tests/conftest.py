import os
import sys
import warnings
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from codingschemes.tasks import make_toy_task

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

ROOT = Path(__file__).resolve().parent.parent
DATA = ROOT / "data"
MNIST_TRAIN = DATA / "mnist-train-images-idx3-ubyte.gz"
MNIST_TEST = DATA / "mnist-test-images-idx3-ubyte.gz"


@pytest.fixture(autouse=True)
def _quiet_runtime_warnings():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        yield


@pytest.fixture(scope="session")
def toy_sigmoid():
    return make_toy_task(100, 120, 3, [0.5, 0.25, 0.25], y_plus=1.0, y_minus=0.5, seed=0)


@pytest.fixture(scope="session")
def toy_relu():
    return make_toy_task(100, 120, 3, [0.5, 0.25, 0.25], y_plus=1.0, y_minus=-0.5, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def mnist_available() -> bool:
    if os.environ.get("CODINGSCHEMES_HIDE_DATA"):
        return False
    return MNIST_TRAIN.exists() and MNIST_TEST.exists()


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
