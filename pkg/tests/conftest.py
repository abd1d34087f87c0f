import numpy as np
import pytest

from dtmnav.camgeom import CameraPose, EgoMotion, ParamVector, generate_observations
from dtmnav.estimator import trace_ground
from dtmnav.scenario import ScenarioConfig, build_terrain

FOV = np.radians(60.0)


@pytest.fixture(scope="session")
def default_map():
    """The default 30 m map (fine synthetic truth resampled)."""
    return build_terrain(ScenarioConfig())[1]


def make_case(grid, seed=0, n=40, sigma_l=0.0, rel=None):
    """Random nadir-ish pose 500 m over ``grid`` with a 40 m / 10 deg ego-motion."""
    rng = np.random.default_rng(seed)
    x, y = rng.uniform(1100, 1900, 2)
    z = grid.height(x, y) + 500.0
    pose = CameraPose([x, y, z], [np.pi + rng.uniform(-0.08, 0.08), rng.uniform(-0.08, 0.08), rng.uniform(-np.pi, np.pi)])
    t = rng.normal(size=3)
    a = rng.normal(size=3)
    ego = EgoMotion(40 * t / np.linalg.norm(t), np.radians(10) * a / np.linalg.norm(a))
    obs, G = generate_observations(pose, ego, grid, n, FOV, sigma_l, seed + 100)
    theta = ParamVector(pose, ego).as_array()
    return theta, obs, G


@pytest.fixture(scope="session")
def exact_case(default_map):
    theta, obs, G = make_case(default_map, seed=3)
    return theta, trace_ground(theta, obs, default_map), G


# One summary line per acceptance criterion, printed after the run.
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
