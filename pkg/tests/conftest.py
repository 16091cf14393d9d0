import numpy as np
import pytest

from petpost.kinetics import ForwardModel, default_reference_tac, default_schedule, make_grid


@pytest.fixture(scope="session")
def schedule():
    return default_schedule()


@pytest.fixture(scope="session")
def fine_grid(schedule):
    return make_grid(schedule.total, 0.1)


@pytest.fixture(scope="session")
def reference(fine_grid):
    return default_reference_tac(fine_grid)


@pytest.fixture(scope="session")
def forward(reference, schedule):
    return ForwardModel(reference, schedule)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


_criterion_lines: list[str] = []


@pytest.fixture(scope="session")
def criterion_log():
    """Append-only list of one-line acceptance verdicts, echoed in the terminal summary."""
    return _criterion_lines


def pytest_terminal_summary(terminalreporter):
    if _criterion_lines:
        terminalreporter.section("acceptance criteria")
        for line in _criterion_lines:
            terminalreporter.write_line(line)
