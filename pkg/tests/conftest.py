import numpy as np
import pytest

from csmpc.core import Dataset, ScenarioConfig, Trajectory
from csmpc.scenario import generate_dataset


@pytest.fixture(scope="session")
def small_cfg():
    return ScenarioConfig(T=10, h=5)


@pytest.fixture(scope="session")
def small_ds(small_cfg):
    return generate_dataset(small_cfg, 20, 40, 10, seed=3)


def straight_walk(start, velocity, h, T, n_agents=1):
    """Noise-free constant-velocity positions, shape (h + T + 1, n_agents, 2)."""
    k = np.arange(-h, T + 1, dtype=float)[:, None, None]
    start = np.broadcast_to(np.asarray(start, dtype=float), (n_agents, 2))
    return start[None] + k * np.asarray(velocity, dtype=float)


def make_dataset(trajs, splits, seed=0):
    return Dataset(tuple(trajs), tuple(splits), seed, None)


def traj(positions, h):
    return Trajectory(np.asarray(positions, dtype=float), h)


# acceptance criteria record one line each; printed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
