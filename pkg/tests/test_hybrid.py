import json
from dataclasses import replace

import numpy as np
import pytest

from src.entropic_mot.common import SOLVER_CHOICES, GridStage, NewtonConfig, ScheduleConfig, SolverSettings
from src.entropic_mot.entropic.core import EntropicProblem
from src.entropic_mot.errors import InstanceError
from src.entropic_mot.experiments.instances import instance_family, random_ordered_instance
from src.entropic_mot.model.measures import CostSpec, DiscreteMeasure, DualState, MotInstance
from src.entropic_mot.oracle.simplex import solve_mot_lp
from src.entropic_mot.solvers.hybrid import (
    check_instance,
    prolong_duals,
    run_hybrid,
    solve_stage,
    switch_rule,
)


def _target(eps, **schedule):
    """Schedule down to eps with a negligible penalty so marginals are matched exactly."""
    return SolverSettings(newton=NewtonConfig(alpha=1e-6), schedule=ScheduleConfig(eps_target=eps, **schedule))


@pytest.fixture(scope="module")
def small_report():
    inst = random_ordered_instance(np.random.default_rng(5), 5, 7)
    return inst, run_hybrid(inst, _target(0.01))


def test_scaled_solve_converges(small_report):
    inst, report = small_report
    assert report.converged
    assert report.epsilon == pytest.approx(0.01)
    eps = [stage.epsilon for stage in report.stages]
    assert eps[0] == 1.0 and all(b < a for a, b in zip(eps, eps[1:]))
    assert report.grad_error <= 2e-4
    assert report.stats.x_error(inst.mu.weights) <= 1e-8
    assert report.stats.martingale_error() <= 1e-8
    json.dumps(report.to_document(), default=float)


def test_dominators_sandwich_the_lp_value(small_report):
    inst, report = small_report
    lp = solve_mot_lp(inst)
    assert lp.optimal
    dom = report.dominators
    assert dom.hull_dual >= lp.value - 1e-8
    assert dom.sup_dual >= dom.hull_dual - 1e-9
    assert dom.primal_value <= lp.value + 5e-3
    assert dom.hull_gap > -5e-3


@pytest.mark.parametrize("solver", SOLVER_CHOICES)
def test_every_solver_reaches_the_target(tiny_instance, solver):
    report = run_hybrid(tiny_instance, _target(0.05), solver=solver, dominator_modes=())
    assert report.converged
    assert report.solver == solver
    assert report.dominators is None


def test_warm_start_continues_from_the_last_epsilon(small_report):
    inst, first = small_report
    second = run_hybrid(inst, _target(0.005), warm_start=first, dominator_modes=("sup",))
    eps = [stage.epsilon for stage in second.stages]
    assert eps[-1] == 0.005 and all(e < 0.01 for e in eps)
    assert second.converged
    assert second.dominators.hull_dual is None


def test_grid_family_is_refined_with_epsilon():
    settings = _target(0.125, grid_1d=[GridStage(1.0, 6), GridStage(0.25, 12)])
    report = run_hybrid(instance_family("left_curtain"), settings)
    grids = [stage.grid for stage in report.stages]
    assert grids[0] == (6, 6)
    assert grids[-1] == (12, 12)
    assert report.grid_size == 12
    assert report.instance.mu.size == 12
    assert report.converged


def test_prolong_duals_copies_nearest_values():
    old_mu = DiscreteMeasure.from_arrays([-1.0, 1.0], [0.5, 0.5])
    old_nu = DiscreteMeasure.from_arrays([-2.0, 0.0, 2.0], [0.25, 0.5, 0.25])
    state = DualState(phi=np.array([1.0, 2.0]), psi=np.array([3.0, 4.0, 5.0]), h=np.array([[6.0], [7.0]]))
    new_mu = DiscreteMeasure.from_arrays([-1.2, -0.8, 0.9], np.full(3, 1 / 3))
    new_nu = DiscreteMeasure.from_arrays([-1.9, 0.2, 1.7, 2.5], np.full(4, 0.25))
    out = prolong_duals(state, old_mu, old_nu, new_mu, new_nu)
    assert out.phi.tolist() == [1.0, 1.0, 2.0]
    assert out.psi.tolist() == [3.0, 4.0, 5.0, 5.0]
    assert out.h[:, 0].tolist() == [6.0, 6.0, 7.0]


def test_prolong_duals_rejects_dimension_change(basket_instance, spread_instance):
    state = DualState.zeros(1, 2, 1)
    with pytest.raises(InstanceError):
        prolong_duals(state, spread_instance.mu, spread_instance.nu, basket_instance.mu, basket_instance.nu)


def test_switch_rule():
    rule = switch_rule(ScheduleConfig())
    assert rule(0.5, 3, 1.0)
    assert not rule(0.6, 3, 1.0)
    assert rule(0.045, 3, 0.05)
    assert not rule(0.048, 3, 0.05)
    assert rule(0.9, 100, 1.0)


def test_check_instance_rejects_unordered_and_invalid(spread_instance):
    reversed_pair = MotInstance(spread_instance.nu, spread_instance.mu, spread_instance.cost)
    with pytest.raises(InstanceError, match="convex order"):
        check_instance(reversed_pair)
    bad = MotInstance(
        DiscreteMeasure.from_arrays([0.0], [0.9]), spread_instance.nu, CostSpec("forward_start_power")
    )
    with pytest.raises(InstanceError):
        check_instance(bad)
    with pytest.raises(InstanceError):
        run_hybrid(reversed_pair, _target(0.5))


def test_unknown_solver(tiny_instance):
    with pytest.raises(ValueError):
        run_hybrid(tiny_instance, _target(0.5), solver="simplex")


def test_hybrid_stage_switches_to_newton(small_instance):
    settings = SolverSettings()
    settings = replace(settings, schedule=replace(settings.schedule, switch_max_iters=5))
    prob = EntropicProblem(small_instance, 0.05, config=settings.entropic)
    state = DualState.zeros(small_instance.mu.size, small_instance.nu.size, 1)
    state, log, converged, switched_at = solve_stage(prob, state, "hybrid", 1e-6, settings)
    assert converged
    assert switched_at is not None and switched_at <= 5
    assert log.last_error <= 1e-6


@pytest.mark.slow
def test_hull_gap_shrinks_with_epsilon():
    family = instance_family("left_curtain")
    settings = _target(1e-3, grid_1d=[GridStage(1.0, 20), GridStage(0.05, 60)])
    coarse = run_hybrid(family, replace(settings, schedule=replace(settings.schedule, eps_target=1e-2)))
    fine = run_hybrid(family, settings, warm_start=coarse)
    assert coarse.converged and fine.converged
    assert 0 < fine.dominators.hull_gap < coarse.dominators.hull_gap


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(20))
def test_entropic_value_matches_the_lp(seed):
    rng = np.random.default_rng(seed)
    inst = random_ordered_instance(rng, int(rng.integers(3, 9)), int(rng.integers(5, 13)))
    report = run_hybrid(inst, _target(1e-4))
    lp = solve_mot_lp(inst)
    assert report.converged and lp.optimal
    dom = report.dominators
    assert abs(dom.primal_value - lp.value) <= 5 * 1e-4 * np.log(inst.mu.size * inst.nu.size)
    assert dom.hull_dual >= lp.value - 1e-8


@pytest.mark.slow
def test_gap_over_epsilon_approaches_half_a_dimension():
    report = run_hybrid(instance_family("left_curtain"), _target(1e-4))
    assert report.converged
    assert 0.35 <= report.dominators.hull_gap / report.epsilon <= 0.65


@pytest.mark.slow
def test_basket_gap_over_epsilon():
    report = run_hybrid(instance_family("basket2d"), _target(1e-3))
    assert report.converged
    assert 0.6 <= report.dominators.hull_gap / report.epsilon <= 1.4
