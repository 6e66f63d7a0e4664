import numpy as np
import pytest

from mosabench.diffcore import Param


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_param(name, shape, rng, scale=1.0):
    return Param(name, rng.normal(0.0, scale, size=shape))


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
