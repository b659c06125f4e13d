import warnings

import numpy as np
import pytest

from podtas.domain import BoundaryConfig, Grid, SILICON, default_floorplan, parse_floorplan
from podtas.oracle import ThermalSetup, default_setup
from podtas.pipeline import build_model, training_snapshots
from podtas.steady import calibrate
from podtas.tasks import default_task_set

TWO_BLOCKS = """
chip 4 2 0.3
left 0 0 2 2 core
right 2 0 2 2 core
"""


@pytest.fixture(scope="session")
def floorplan():
    return default_floorplan()


@pytest.fixture(scope="session")
def setup():
    return default_setup()


@pytest.fixture(scope="session")
def small_setup():
    """Coarse two-block die for quick oracle checks."""
    fp = parse_floorplan(TWO_BLOCKS)
    return ThermalSetup(fp, Grid.for_floorplan(fp, 8, 4, 3), SILICON, BoundaryConfig(8000.0, 45.0))


@pytest.fixture(scope="session")
def tasks4():
    return default_task_set(4)


@pytest.fixture(scope="session")
def snapshots(setup, tasks4):
    """Default training ensemble (about 20 s of oracle time)."""
    return training_snapshots(setup, np.random.default_rng(0), tasks4)


@pytest.fixture(scope="session")
def model(snapshots, setup):
    return build_model(snapshots, setup, 30)


@pytest.fixture(scope="session")
def coupling(setup):
    return calibrate(setup)


@pytest.fixture
def quiet():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        yield


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report_criterion():
    """Record one acceptance line; they are echoed together in the terminal summary."""
    def record(number: int, title: str, ok: bool, detail: str) -> bool:
        line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {title} | {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
