import numpy as np
import pytest

from mg_lab.mixture import grid_two_class, make_mixture
from mg_lab.schedule import linear_schedule


@pytest.fixture(scope="session")
def grid():
    return grid_two_class()


@pytest.fixture(scope="session")
def two_mode():
    return grid_two_class(1, 2, 2.0, 0.3)


@pytest.fixture(scope="session")
def schedule():
    return linear_schedule()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def standard_gaussian():
    return make_mixture([[0.0, 0.0]], 1.0, [0])


@pytest.fixture(scope="session")
def one_class():
    return make_mixture([[-1.0, 0.5], [2.0, -1.0]], [0.4, 0.7], [0, 0])


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line for an acceptance criterion and assert it."""
    def record(number: int, name: str, passed: bool, detail: str):
        line = f"{'PASS' if passed else 'FAIL'} [{number:2d}] {name}: {detail}"
        print(line)
        ACCEPTANCE_LINES.append(line)
        assert passed, line
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: l.split("]")[0].split("[")[1].strip().zfill(2)):
            terminalreporter.write_line(line)
