import sys

import numpy as np
import pytest

from safeguide import cbf, clf
from safeguide.model import CartesianState

EX1_STATE = CartesianState(7.0, 0.63, 2.55, -3.73, 4.13)
EX2_STATE = CartesianState(-5.0, 4.58, 4.65, -3.42, 4.71)


@pytest.fixture(scope="session")
def gains():
    return clf.Gains()


@pytest.fixture(scope="session")
def lyap(gains):
    return clf.lyapunov_data(gains)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def ex1_barrier():
    return cbf.example1_barrier()


@pytest.fixture(scope="session")
def ex2_barrier():
    return cbf.example2_barrier()


def pytest_terminal_summary(terminalreporter):
    results = getattr(sys.modules.get("test_acceptance"), "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for i in sorted(results):
            terminalreporter.write_line(results[i])
