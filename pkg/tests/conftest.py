import numpy as np
import pytest

# Reference row-normalised confusion matrices (percent), rows = actual class.
EIMM_MATRIX = np.array([
    [91.1, 2.6, 2.2, 0.7, 1.6, 0.2, 0.5, 1.0],
    [0.7, 79.3, 6.7, 2.3, 5.2, 0.3, 1.4, 4.0],
    [0.6, 8.7, 70.2, 3.4, 7.4, 0.7, 2.8, 6.2],
    [0.0, 0.2, 0.4, 94.6, 1.6, 0.8, 2.0, 0.3],
    [0.2, 6.5, 6.1, 15.2, 61.0, 1.6, 3.2, 6.3],
    [0.0, 0.6, 1.2, 8.9, 3.1, 82.9, 2.0, 1.2],
    [0.0, 1.1, 1.7, 16.3, 2.3, 1.1, 76.4, 1.0],
    [0.3, 4.7, 5.1, 3.4, 5.2, 0.7, 1.8, 78.8],
])

SED_MATRIX = np.array([
    [82.4, 1.4, 1.4, 2.1, 0.5, 1.1, 11.2],
    [0.3, 68.5, 15.4, 4.1, 2.2, 4.4, 5.1],
    [0.2, 14.5, 59.1, 9.5, 3.2, 6.2, 7.2],
    [0.3, 3.3, 7.7, 74.1, 2.6, 3.2, 8.9],
    [0.1, 2.1, 4.0, 3.1, 84.2, 3.5, 3.0],
    [0.4, 6.9, 10.1, 6.3, 5.6, 63.3, 7.5],
    [2.4, 3.9, 6.8, 9.5, 2.2, 2.8, 72.5],
])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
