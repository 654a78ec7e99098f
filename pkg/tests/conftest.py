import numpy as np
import pytest

from cascadesim.occupancy import GridConfig
from cascadesim.pipeline import TrainConfig, train_toy
from cascadesim.scenario import synth_scenario

# coarse grid keeping the latent size equal to the context width (4 * 4 * 2 = 32)
TINY_GRID = GridConfig((2.0, 2.0, 0.8), (-40.0, -40.0, -1.0, 40.0, 40.0, 2.2), (4, 4, 2))


@pytest.fixture(scope="session")
def tiny_grid():
    return TINY_GRID


@pytest.fixture(scope="session")
def tiny_scenes():
    return [synth_scenario(s, 4, "straight", horizon=20) for s in range(3)]


@pytest.fixture(scope="session")
def tiny_bundle(tiny_scenes):
    cfg = TrainConfig(grid=TINY_GRID, kf=10, flow_steps=5, t_draws=4, k_draws=8, seed=0)
    return train_toy(tiny_scenes, cfg)


@pytest.fixture(scope="session")
def protocol_bundle():
    """Full 80-frame horizon on the tiny grid."""
    scenes = [synth_scenario(s, 3, "straight") for s in range(2)]
    cfg = TrainConfig(grid=TINY_GRID, kf=10, flow_steps=5, t_draws=2, k_draws=4, seed=0)
    return train_toy(scenes, cfg), scenes


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
