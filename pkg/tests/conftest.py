import numpy as np
import pytest

from footopt.constraints import build_policy
from footopt.geometry import DEFAULT_DURATIONS, complete_polygon


def random_free(rng, n=None, scale=0.1):
    shape = (12,) if n is None else (n, 12)
    return rng.uniform(-scale, scale, shape)


def random_polygon(rng, durations=DEFAULT_DURATIONS):
    start = rng.uniform(-0.05, 0.05, 3)
    landing = rng.uniform(-0.05, 0.05, 3)
    return complete_polygon(random_free(rng), start, landing, durations)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def policy():
    return build_policy()


CRITERION_LINES = {}


def record_criterion(number, passed, detail):
    CRITERION_LINES[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    print(CRITERION_LINES[number])


def pytest_terminal_summary(terminalreporter):
    if CRITERION_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(CRITERION_LINES):
            terminalreporter.write_line(CRITERION_LINES[number])
