import logging

import numpy as np
import pytest
from scipy.optimize import brentq, minimize
from scipy.special import logsumexp, softmax

from src.entropic_mot.common import StopRule
from src.entropic_mot.entropic.core import (
    ActiveSets,
    EntropicProblem,
    delta,
    delta_entries,
    interior_violations,
    kernel_entries,
    kernel_stats,
    nearest_indices,
    prolong_active,
    segment_lse,
    segment_sum,
    stabilized_log_mean,
    truncate_kernel,
    update_h,
    update_h_all,
    update_phi,
    update_psi,
)
from src.entropic_mot.errors import InfeasibleMartingaleError, InstanceError, UnsupportedDimensionError
from src.entropic_mot.model.measures import CostSpec, DiscreteMeasure, DualState, MotInstance
from src.entropic_mot.solvers.newton import implicitation
from src.entropic_mot.solvers.sinkhorn import run_sinkhorn


def _zeros(inst):
    return DualState.zeros(inst.mu.size, inst.nu.size, inst.dim)


def test_segment_reductions():
    indptr = np.array([0, 2, 5])
    values = np.array([1.0, 2.0, 0.0, 0.0, 0.0])
    assert segment_sum(values, indptr).tolist() == [3.0, 0.0]
    lse = segment_lse(np.array([1000.0, 1000.0, -1.0]), np.array([0, 2, 3]))
    assert lse == pytest.approx([1000.0 + np.log(2.0), -1.0])


def test_stabilized_log_mean():
    assert stabilized_log_mean([800.0, 800.0], 1.0) == pytest.approx(801.0 + np.log(2.0))
    with pytest.raises(ValueError):
        stabilized_log_mean([])
    with pytest.raises(ValueError):
        stabilized_log_mean([0.0, np.inf])


def test_active_sets_validation():
    with pytest.raises(InstanceError):
        ActiveSets.from_rows([[0, 1], []], n_y=2)
    with pytest.raises(InstanceError):
        ActiveSets.from_rows([[0], [0]], n_y=2)
    active = ActiveSets.from_rows([[1, 0], [2]], n_y=3)
    assert active.row(0).tolist() == [0, 1]
    assert active.to_mask().tolist() == [[True, True, False], [False, False, True]]
    assert ActiveSets.from_mask(active.to_mask()).indices.tolist() == [0, 1, 2]


def test_problem_rejects_bad_epsilon(small_instance):
    with pytest.raises(InstanceError):
        EntropicProblem(small_instance, 0.0)


def test_delta_matches_entries(small_instance, rng):
    prob = EntropicProblem(small_instance, 0.3)
    state = DualState(phi=rng.normal(size=5), psi=rng.normal(size=7), h=rng.normal(size=(5, 1)))
    entries = delta_entries(prob, state)
    assert entries[2 * 7 + 3] == pytest.approx(delta(prob, state, 2, 3))


def test_psi_block_matches_nu_exactly(small_instance, rng):
    prob = EntropicProblem(small_instance, 0.5)
    state = DualState(phi=rng.normal(size=5), psi=np.zeros(7), h=rng.normal(size=(5, 1)))
    state = state.replace(psi=update_psi(prob, state))
    stats = kernel_stats(prob, state)
    assert stats.y_error(small_instance.nu.weights) <= 1e-12


def test_phi_block_matches_mu_exactly(small_instance, rng):
    prob = EntropicProblem(small_instance, 0.5)
    state = DualState(phi=np.zeros(5), psi=rng.normal(size=7), h=rng.normal(size=(5, 1)))
    state = state.replace(phi=update_phi(prob, state))
    assert kernel_stats(prob, state).x_error(small_instance.mu.weights) <= 1e-12


@pytest.mark.parametrize("eps", [1.0, 0.1, 0.01])
def test_h_block_solves_martingale_condition(small_instance, rng, eps):
    prob = EntropicProblem(small_instance, eps)
    state = DualState(phi=np.zeros(5), psi=rng.normal(size=7), h=np.zeros((5, 1)))
    block = update_h_all(prob, state)
    solved = state.replace(phi=block.phi, h=block.h)
    stats = kernel_stats(prob, solved)
    assert stats.x_error(small_instance.mu.weights) <= 1e-9
    assert stats.martingale_error() <= 1e-9


def test_h_block_in_two_dimensions(basket_instance, rng):
    prob = EntropicProblem(basket_instance, 0.2)
    state = DualState(phi=np.zeros(4), psi=rng.normal(size=9), h=np.zeros((4, 2)))
    block = update_h_all(prob, state)
    stats = kernel_stats(prob, state.replace(phi=block.phi, h=block.h))
    assert stats.martingale_error() <= 1e-9


def test_single_row_update_on_symmetric_spread(spread_instance):
    prob = EntropicProblem(spread_instance, 0.1)
    update = update_h(prob, _zeros(spread_instance), 0)
    assert update.h_x == pytest.approx([0.0], abs=1e-12)
    assert update.phi_x == pytest.approx(0.1 * np.log(2.0))
    assert update.iterations == 0


def test_point_outside_its_active_hull_is_infeasible():
    inst = MotInstance(
        mu=DiscreteMeasure.from_arrays([0.0, 2.0], [0.5, 0.5]),
        nu=DiscreteMeasure.from_arrays([-1.0, 1.0], [0.5, 0.5]),
        cost=CostSpec("distance"),
    )
    prob = EntropicProblem(inst, 0.5)
    with pytest.raises(InfeasibleMartingaleError) as info:
        update_h_all(prob, _zeros(inst))
    assert info.value.x_indices == [1]


def test_interior_check_in_two_dimensions():
    x = np.array([[0.0, 0.0]])
    y = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]])
    half = ActiveSets.from_rows([[0, 1, 2]], n_y=3)
    assert interior_violations(x, y[:3], half).tolist() == [0]
    around = ActiveSets.from_rows([[0, 1, 2, 3]], n_y=4)
    assert interior_violations(x, y, around).size == 0
    segment = ActiveSets.from_rows([[0, 1]], n_y=2)
    assert interior_violations(x, y[[0, 2]], segment).size == 0


def test_interior_check_rejects_three_dimensions():
    x = np.zeros((1, 3))
    y = np.eye(3)
    with pytest.raises(UnsupportedDimensionError):
        interior_violations(x, y, ActiveSets.full(1, 3))


def test_dual_value_identity(small_instance, rng):
    prob = EntropicProblem(small_instance, 0.2)
    state = DualState(phi=rng.normal(size=5), psi=rng.normal(size=7), h=rng.normal(size=(5, 1)))
    stats = kernel_stats(prob, state)
    expected = small_instance.mu.weights @ state.phi + small_instance.nu.weights @ state.psi
    expected += 0.2 * np.sum(kernel_entries(prob, state))
    assert stats.dual_value == pytest.approx(expected)


def test_truncation_keeps_a_valid_pattern(small_instance):
    prob = EntropicProblem(small_instance, 0.05)
    result = run_sinkhorn(prob, _zeros(small_instance), StopRule(grad_tol=1e-6, max_iters=3000))
    active = truncate_kernel(prob, result.state, 1e-2)
    assert active.nnz < prob.nnz
    assert np.all(active.counts() > 0)
    assert np.all(active.to_mask().any(axis=0))
    assert interior_violations(small_instance.mu.points, small_instance.nu.points, active).size == 0


def test_truncation_with_zero_factor_is_identity(small_instance):
    prob = EntropicProblem(small_instance, 0.1)
    assert truncate_kernel(prob, _zeros(small_instance), 0.0) is prob.active


def test_nearest_indices_break_ties_low():
    old = np.array([[0.0], [1.0]])
    new = np.array([[0.5], [0.9], [-3.0]])
    assert nearest_indices(old, new).tolist() == [0, 1, 0]


def test_prolong_active_on_refined_grid():
    old_mu = DiscreteMeasure.from_arrays([-0.5, 0.5], [0.5, 0.5])
    old_nu = DiscreteMeasure.from_arrays([-1.0, 0.0, 1.0], [0.25, 0.5, 0.25])
    new_mu = DiscreteMeasure.from_arrays([-0.75, -0.25, 0.25, 0.75], [0.25] * 4)
    new_nu = DiscreteMeasure.from_arrays([-1.0, -0.5, 0.0, 0.5, 1.0], [0.2] * 5)
    active = ActiveSets.from_rows([[0, 1], [1, 2]], n_y=3)
    refined = prolong_active(active, old_mu, old_nu, new_mu, new_nu)
    assert refined.n_x == 4 and refined.n_y == 5
    assert np.all(refined.to_mask().any(axis=0))
    assert interior_violations(new_mu.points, new_nu.points, refined).size == 0


def test_nearest_indices_pick_lowest_among_equidistant_points():
    corners = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    assert nearest_indices(corners, np.array([[0.5, 0.5]])).tolist() == [0]
    assert nearest_indices(corners, np.array([[1.0, 0.5]])).tolist() == [1]
    assert nearest_indices(corners[::-1], np.array([[0.5, 0.5]])).tolist() == [0]


def test_nearest_indices_match_brute_force(rng):
    old = rng.uniform(-1.0, 1.0, size=(40, 2))
    new = rng.uniform(-1.2, 1.2, size=(200, 2))
    brute = np.argmin(np.linalg.norm(new[:, None, :] - old[None, :, :], axis=2), axis=1)
    assert nearest_indices(old, new).tolist() == brute.tolist()


def test_phi_and_psi_blocks_match_pairwise_formula(small_instance, rng):
    eps = 0.5
    prob = EntropicProblem(small_instance, eps)
    h = rng.normal(size=(5, 1))
    no_phi = DualState(phi=np.zeros(5), psi=rng.normal(size=7), h=h)
    no_psi = DualState(phi=rng.normal(size=5), psi=np.zeros(7), h=h)
    phi = update_phi(prob, no_phi)
    psi = update_psi(prob, no_psi)
    for xi in range(5):
        terms = [np.exp(-delta(prob, no_phi, xi, yi) / eps) for yi in range(7)]
        assert phi[xi] == pytest.approx(eps * np.log(np.sum(terms) / small_instance.mu.weights[xi]))
    for yi in range(7):
        terms = [np.exp(-delta(prob, no_psi, xi, yi) / eps) for xi in range(5)]
        assert psi[yi] == pytest.approx(eps * np.log(np.sum(terms) / small_instance.nu.weights[yi]))


def test_h_block_matches_scalar_root(small_instance, rng):
    eps = 0.1
    prob = EntropicProblem(small_instance, eps)
    state = DualState(phi=np.zeros(5), psi=rng.normal(size=7), h=np.zeros((5, 1)))
    y = small_instance.nu.points[:, 0]
    for xi, x in enumerate(small_instance.mu.points[:, 0]):
        base = np.array([-delta(prob, state, xi, yi) / eps for yi in range(7)])

        def barycentre(h):
            return float(softmax(base - h * (y - x) / eps) @ (y - x))

        root = brentq(barycentre, -100.0, 100.0, xtol=1e-14)
        update = update_h(prob, state, xi)
        assert update.h_x[0] == pytest.approx(root, abs=1e-8)
        expected_phi = eps * (logsumexp(base - root * (y - x) / eps) - np.log(small_instance.mu.weights[xi]))
        assert update.phi_x == pytest.approx(expected_phi, abs=1e-8)


def test_implied_kernel_has_unit_mass(small_instance, rng):
    prob = EntropicProblem(small_instance, 0.05)
    istate = implicitation(prob, rng.normal(size=7))
    assert np.sum(istate.p) == pytest.approx(1.0, abs=1e-12)
    assert istate.row_mass == pytest.approx(small_instance.mu.weights, abs=1e-12)


def test_implicitation_matches_generic_minimizer(rng):
    inst = MotInstance(
        mu=DiscreteMeasure.from_arrays([-0.25, 0.25], [0.5, 0.5]),
        nu=DiscreteMeasure.from_arrays([-1.0, 0.0, 1.0], [0.225, 0.55, 0.225]),
        cost=CostSpec("distance"),
    )
    eps = 0.5
    prob = EntropicProblem(inst, eps)
    psi = rng.normal(size=3)

    def objective(z):
        state = DualState(phi=z[:2], psi=psi, h=z[2:].reshape(2, 1))
        mass = sum(np.exp(-delta(prob, state, xi, yi) / eps) for xi in range(2) for yi in range(3))
        return float(inst.mu.weights @ z[:2] + eps * mass)

    found = minimize(objective, np.zeros(4), method="BFGS", options={"gtol": 1e-10})
    istate = implicitation(prob, psi)
    assert istate.phi == pytest.approx(found.x[:2], abs=1e-5)
    assert istate.h[:, 0] == pytest.approx(found.x[2:], abs=1e-5)


def test_truncation_at_convergence_drops_little_mass(small_instance):
    prob = EntropicProblem(small_instance, 0.05)
    state = run_sinkhorn(prob, _zeros(small_instance), StopRule(grad_tol=1e-9, max_iters=20000)).state
    active = truncate_kernel(prob, state, 1e-7)
    p = kernel_entries(prob, state)
    kept = active.to_mask()[prob.rows, prob.cols]
    assert np.sum(p[~kept]) <= 1e-5


def test_truncation_logs_mass_outside_returned_pattern(small_instance, caplog):
    prob = EntropicProblem(small_instance, 0.05)
    state = run_sinkhorn(prob, _zeros(small_instance), StopRule(grad_tol=1e-6, max_iters=3000)).state
    with caplog.at_level(logging.INFO, logger="src.entropic_mot.entropic.core"):
        active = truncate_kernel(prob, state, 1e-2)
    p = kernel_entries(prob, state)
    kept = active.to_mask()[prob.rows, prob.cols]
    records = [r for r in caplog.records if r.getMessage().startswith("truncated kernel")]
    assert len(records) == 1
    assert records[0].args[3] == pytest.approx(float(np.sum(p[~kept])), rel=1e-12, abs=1e-300)


def test_solves_are_deterministic(small_instance):
    prob = EntropicProblem(small_instance, 0.1)
    first = run_sinkhorn(prob, _zeros(small_instance), StopRule(grad_tol=1e-9, max_iters=2000))
    second = run_sinkhorn(prob, _zeros(small_instance), StopRule(grad_tol=1e-9, max_iters=2000))
    assert first.iterations == second.iterations
    assert np.array_equal(first.state.psi, second.state.psi)
    assert np.array_equal(first.state.phi, second.state.phi)
    assert np.array_equal(first.state.h, second.state.h)
    psi = first.state.psi
    assert np.array_equal(implicitation(prob, psi).p, implicitation(prob, psi).p)
