import numpy as np
import pytest

from orthoddc import dgp

# lines printed by the acceptance tests, echoed at the end of the run
ACCEPTANCE_LINES = []


def record(n, passed, detail):
    line = f"criterion {n:>2} [{'PASS' if passed else 'FAIL'}] {detail}"
    ACCEPTANCE_LINES.append((n, line))
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_model():
    return dgp.default_model(d_x=5)


@pytest.fixture(scope="session")
def small_table(small_model):
    return dgp.OracleTable(small_model, dgp.default_truth(), z_nodes=61)


@pytest.fixture(scope="session")
def small_panel(small_model, small_table):
    return dgp.simulate_panel(small_model, dgp.default_truth(), 400, 7, table=small_table)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
