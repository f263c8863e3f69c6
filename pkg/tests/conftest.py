import numpy as np
import pytest

from fbsdelab.model import ProblemSpec, SamplingBox
from fbsdelab.presets import build_preset
from fbsdelab.solver import Grid, solve


def unit_sigma(t, x, u):
    return np.broadcast_to(np.eye(x.shape[1]), (len(t), x.shape[1], x.shape[1])).copy()


def zero_driver(n):
    return lambda t, x, u, p: np.zeros((len(t), n))


def scalar_spec(driver=None, terminal=np.sin, sigma=unit_sigma, horizon=1.0, dim_u=1):
    return ProblemSpec(1, dim_u, horizon, sigma, driver or zero_driver(dim_u),
                       lambda x: terminal(x) if dim_u == 1 else terminal(x))


@pytest.fixture(scope="session")
def heat():
    data = build_preset("heat1d")
    grid = Grid.from_box(data.box, data.dx, data.spec.horizon)
    return data, grid, solve(data.spec, grid)


@pytest.fixture(scope="session")
def small_box():
    return SamplingBox((-1.0,), (1.0,), 1.0, 2.0)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
