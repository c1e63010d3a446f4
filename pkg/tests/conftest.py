import numpy as np
import pytest

KINETIC_A = np.array([[0.0, -1.0], [1.0, 1.0]])
KINETIC_B = np.diag([0.0, 1.0])

_ACCEPTANCE = []


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def kinetic():
    return KINETIC_A.copy(), KINETIC_B.copy()


@pytest.fixture
def report():
    """Print and remember one PASS/FAIL line for an acceptance criterion."""

    def record(number, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        print(line)
        _ACCEPTANCE.append((number, line))
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
