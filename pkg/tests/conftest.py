import numpy as np
import pytest

from latentflow import autodiff as ad

ACCEPTANCE_LINES: list = []


@pytest.fixture
def f64():
    with ad.precision("f64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
