import numpy as np
import pytest

from duat import tensor as T

# acceptance lines collected during the session, printed in the summary
ACCEPTANCE_LINES = []


@pytest.fixture(autouse=True)
def engine_defaults():
    """Every test starts in float64 debug mode and restores the previous state."""
    with T.precision("test", debug=True):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
