import numpy as np
import pytest

from src.entropic_mot.common import SemidualConfig
from src.entropic_mot.errors import OutOfHullError
from src.entropic_mot.experiments.instances import random_ordered_instance
from src.entropic_mot.model.measures import CostSpec, DiscreteMeasure, MotInstance
from src.entropic_mot.oracle.simplex import solve_mot_lp
from src.entropic_mot.solvers.semidual import run_subgradient_descent, semidual_value_and_subgradient


def test_flat_cost_on_spread(spread_instance):
    inst = MotInstance(spread_instance.mu, spread_instance.nu, CostSpec("tabulated", np.zeros((1, 2))))
    iterate = semidual_value_and_subgradient(inst, np.zeros(2))
    assert iterate.value == pytest.approx(0.0)
    assert iterate.subgradient == pytest.approx([0.0, 0.0])


def test_translation_invariance(small_instance, rng):
    psi = rng.normal(size=7)
    base = semidual_value_and_subgradient(small_instance, psi).value
    assert semidual_value_and_subgradient(small_instance, psi + 2.5).value == pytest.approx(base, abs=1e-10)


def test_subgradient_is_a_difference_of_probabilities(small_instance, rng):
    for _ in range(5):
        iterate = semidual_value_and_subgradient(small_instance, rng.normal(size=7))
        assert np.all(np.abs(iterate.subgradient) <= 1.0 + 1e-12)
        assert iterate.subgradient.sum() == pytest.approx(0.0, abs=1e-10)


def test_weak_duality_against_lp(small_instance, rng):
    lp = solve_mot_lp(small_instance).value
    for _ in range(10):
        assert semidual_value_and_subgradient(small_instance, rng.normal(size=7)).value >= lp - 1e-9


def test_threads_do_not_change_the_value(small_instance, rng):
    psi = rng.normal(size=7)
    single = semidual_value_and_subgradient(small_instance, psi)
    pooled = semidual_value_and_subgradient(small_instance, psi, threads=3)
    assert pooled.value == single.value
    np.testing.assert_array_equal(pooled.subgradient, single.subgradient)


def test_out_of_hull_names_the_point():
    inst = MotInstance(
        DiscreteMeasure.from_arrays([0.0, 3.0], [0.5, 0.5]),
        DiscreteMeasure.from_arrays([-1.0, 1.0], [0.5, 0.5]),
        CostSpec("distance"),
    )
    with pytest.raises(OutOfHullError, match="x index 1"):
        semidual_value_and_subgradient(inst, np.zeros(2))


def test_no_steps_returns_start(small_instance):
    psi0 = np.linspace(0.0, 1.0, 7)
    result = run_subgradient_descent(small_instance, psi0, SemidualConfig(n_max=0))
    assert result.best is result.last
    np.testing.assert_array_equal(result.best.psi, psi0)
    assert len(result.history) == 1


def test_descent_improves_and_respects_the_bound(small_instance):
    lp = solve_mot_lp(small_instance).value
    result = run_subgradient_descent(small_instance, np.zeros(7), SemidualConfig(c0=0.5, n_max=500))
    values = [row[1] for row in result.history]
    assert result.best.value <= values[0]
    assert result.best.value == min(values)
    assert result.best.value >= lp - 1e-9


@pytest.mark.slow
def test_descent_approaches_lp_on_twenty_points():
    inst = random_ordered_instance(np.random.default_rng(11), 20, 20)
    lp = solve_mot_lp(inst).value
    result = run_subgradient_descent(inst, np.zeros(20), SemidualConfig(n_max=10_000))
    assert result.best.value - lp <= 1e-1
