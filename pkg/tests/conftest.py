import numpy as np
import pytest

from ioredux import (BuiltinRunner, ModelConfig, build_rom, evaluate_design, smolyak_grid)
from ioredux.model import ParameterSpace
from ioredux.reduction import SnapshotMatrix


@pytest.fixture(scope="session")
def grid_10_2():
    return smolyak_grid(10, 2)


@pytest.fixture(scope="session")
def model_config():
    return ModelConfig.default()


@pytest.fixture(scope="session")
def epidemic_runner(model_config):
    return BuiltinRunner(model_config)


@pytest.fixture(scope="session")
def epidemic_snapshots(grid_10_2, model_config, epidemic_runner):
    return evaluate_design(model_config.parameter_space(), grid_10_2.points, epidemic_runner,
                           grid_10_2.point_ids)


@pytest.fixture(scope="session")
def epidemic_rom(grid_10_2, epidemic_snapshots, model_config):
    return build_rom(epidemic_snapshots, grid_10_2, 0.95, space=model_config.parameter_space())


class LinearModel:
    """y = A theta + b on the unit box; doubles as a runner."""

    def __init__(self, a, b):
        self.a = np.asarray(a, float)
        self.b = np.asarray(b, float)
        self.output_labels = tuple(f"y_{i + 1}" for i in range(self.a.shape[0]))

    def __call__(self, theta_hats, point_ids=None):
        return np.atleast_2d(theta_hats) @ self.a.T + self.b

    def snapshots(self, grid):
        return SnapshotMatrix(self(grid.points).T, self.output_labels, grid.point_ids)


def make_linear_model(seed=3, d=6, m=10):
    rng = np.random.default_rng(seed)
    return LinearModel(rng.normal(size=(d, m)), rng.normal(size=d))


@pytest.fixture(scope="session")
def linear_model():
    return make_linear_model()


@pytest.fixture(scope="session")
def linear_rom(linear_model, grid_10_2):
    return build_rom(linear_model.snapshots(grid_10_2), grid_10_2, 0.95,
                     space=ParameterSpace.unit(10))
