from __future__ import annotations

import numpy as np
import pytest

from src.entropic_mot.common import SolverSettings
from src.entropic_mot.experiments.instances import random_ordered_instance, tilt_to_mean
from src.entropic_mot.model.measures import CostSpec, DiscreteMeasure, MotInstance


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240611)


@pytest.fixture
def spread_instance() -> MotInstance:
    """mu = delta_0 and nu = (delta_-1 + delta_1) / 2."""
    return MotInstance(
        mu=DiscreteMeasure.from_arrays([0.0], [1.0]),
        nu=DiscreteMeasure.from_arrays([-1.0, 1.0], [0.5, 0.5]),
        cost=CostSpec("forward_start_power"),
    )


@pytest.fixture
def small_instance() -> MotInstance:
    """5 x 7 instance in convex order."""
    return random_ordered_instance(np.random.default_rng(5), 5, 7)


@pytest.fixture
def tiny_instance() -> MotInstance:
    """4 x 5 instance in convex order."""
    return random_ordered_instance(np.random.default_rng(4), 4, 5)


@pytest.fixture
def symmetric_instance() -> MotInstance:
    mu = DiscreteMeasure.from_arrays([-0.5, 0.0, 0.5], [0.25, 0.5, 0.25])
    nu = DiscreteMeasure.from_arrays([-1.0, -0.5, 0.0, 0.5, 1.0], [0.15, 0.2, 0.3, 0.2, 0.15])
    return MotInstance(mu=mu, nu=nu, cost=CostSpec("distance"))


@pytest.fixture
def basket_instance() -> MotInstance:
    """2 x 2 grid of x points, nu the law of product martingale kernels on a 3 x 3 grid."""
    axis_x = np.array([-0.25, 0.25])
    axis_y = np.array([-1.0, 0.0, 1.0])
    x = np.array(np.meshgrid(axis_x, axis_x, indexing="ij")).reshape(2, -1).T
    y = np.array(np.meshgrid(axis_y, axis_y, indexing="ij")).reshape(2, -1).T
    nu_w = np.zeros(len(y))
    for a, b in x:
        kx = tilt_to_mean(axis_y, np.ones(3), a)
        ky = tilt_to_mean(axis_y, np.ones(3), b)
        nu_w += 0.25 * np.outer(kx, ky).reshape(-1)
    return MotInstance(
        mu=DiscreteMeasure.from_arrays(x, np.full(4, 0.25)),
        nu=DiscreteMeasure.from_arrays(y, nu_w / nu_w.sum()),
        cost=CostSpec("basket2d"),
    )


@pytest.fixture
def settings() -> SolverSettings:
    return SolverSettings()
