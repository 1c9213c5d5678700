import numpy as np
import pytest

from mltsim.tensor import ElementType, Tensor

# Filled by test_acceptance.py, one line per criterion, printed after the run.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_LINES:
        terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def fp32(values):
    return Tensor.from_array(np.asarray(values, dtype=np.float32), ElementType.FP32)
