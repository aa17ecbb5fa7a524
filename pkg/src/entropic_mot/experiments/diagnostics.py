from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph
from scipy.spatial import cKDTree

from ..common import SOLVER_CHOICES, SolverSettings
from ..entropic.core import EntropicProblem, prolong_active
from ..errors import InfeasibleMartingaleError, IterationLimitError
from ..hull.dominators import DOMINATOR_MODES
from ..model.measures import DualState
from ..solvers.hybrid import GridFamily, InstanceSource, SolveReport, check_instance, prolong_duals, run_hybrid, solve_stage

logger = logging.getLogger(__name__)

# Hardest stages of the reference benchmark runs.
BENCH_EPSILON_1D = 4.2e-4
BENCH_EPSILON_2D = 7.4e-3


@dataclass(frozen=True)
class GapRow:
    eps: float
    gap: float
    gap_over_eps: float
    mode: str
    converged: bool = True
    error: Optional[str] = None

    CSV_HEADER = ("eps", "gap", "gap_over_eps", "mode")

    def row(self) -> tuple:
        return (self.eps, self.gap, self.gap_over_eps, self.mode)


@dataclass(frozen=True)
class BenchRow:
    solver: str
    iter: int
    seconds: float
    grad_error: float
    dual_value: float

    CSV_HEADER = ("solver", "iter", "seconds", "grad_error", "dual_value")

    def row(self) -> tuple:
        return (self.solver, self.iter, self.seconds, self.grad_error, self.dual_value)


def _with_target(settings: SolverSettings, epsilon: float) -> SolverSettings:
    schedule = settings.schedule
    start = max(schedule.eps_start, epsilon)
    return replace(settings, schedule=replace(schedule, eps_start=start, eps_target=epsilon))


def gap_curve(
    source: InstanceSource,
    eps_list: Sequence[float],
    modes: Sequence[str] = DOMINATOR_MODES,
    settings: Optional[SolverSettings] = None,
) -> List[GapRow]:
    """Duality gap of the dominators against epsilon, warm-starting each epsilon from the previous one."""
    if any(b >= a for a, b in zip(eps_list, eps_list[1:])):
        raise ValueError("eps_list must be strictly decreasing")
    settings = settings or SolverSettings()
    rows: List[GapRow] = []
    warm: Optional[SolveReport] = None
    for eps in eps_list:
        report = run_hybrid(source, _with_target(settings, eps), warm_start=warm, dominator_modes=modes)
        failure = next((stage.error for stage in report.stages if stage.error), None)
        for mode in modes:
            gap = report.dominators.gap(mode) if report.dominators is not None and failure is None else math.nan
            rows.append(GapRow(eps, gap, gap / eps, mode, report.converged, failure))
            logger.info("gap curve eps=%.3g mode=%s gap=%.6e gap/eps=%.4f", eps, mode, gap, gap / eps)
        if failure is None:
            warm = report
    return rows


def bench(
    source: InstanceSource,
    epsilon: Optional[float] = None,
    settings: Optional[SolverSettings] = None,
    solvers: Sequence[str] = SOLVER_CHOICES,
) -> List[BenchRow]:
    """Traces of every solver on one epsilon stage, all warm-started from the same scaled solve."""
    settings = settings or SolverSettings()
    family = source if isinstance(source, GridFamily) else None
    dim = family.dim if family else source.dim
    epsilon = epsilon or (BENCH_EPSILON_1D if dim == 1 else BENCH_EPSILON_2D)
    schedule = settings.schedule
    previous = epsilon * schedule.eps_factor

    if previous <= schedule.eps_start:
        warm = run_hybrid(source, _with_target(settings, previous), dominator_modes=())
        inst, state, active = warm.instance, warm.state, warm.problem.active
        if family is not None:
            wanted = schedule.grid_size(epsilon, dim)
            if wanted != warm.grid_size:
                refined = family(wanted)
                state = prolong_duals(state, inst.mu, inst.nu, refined.mu, refined.nu)
                active = prolong_active(active, inst.mu, inst.nu, refined.mu, refined.nu)
                inst = refined
    else:
        inst = family(schedule.grid_size(epsilon, dim)) if family else source
        check_instance(inst)
        state, active = DualState.zeros(inst.mu.size, inst.nu.size, inst.dim), None

    prob = EntropicProblem(inst, epsilon, active, None, settings.entropic)
    rows: List[BenchRow] = []
    for solver in solvers:
        try:
            _, log, converged, _ = solve_stage(prob, state, solver, schedule.final_grad_tol, settings)
        except (InfeasibleMartingaleError, IterationLimitError) as exc:
            logger.error("bench %s failed at eps=%.3g: %s", solver, epsilon, exc)
            continue
        rows.extend(BenchRow(solver, r.iteration, r.seconds, r.grad_error, r.dual_value) for r in log.records)
        seconds = log.records[-1].seconds if log.records else 0.0
        logger.info("bench %s: %d iterations, %.2fs, converged=%s", solver, len(log), seconds, converged)
    return rows


def _neighbour_radius(points: np.ndarray, tree: cKDTree) -> float:
    distances, _ = tree.query(points, k=2)
    return 1.5 * float(np.median(distances[:, 1]))


def count_modes(points: np.ndarray, weights: np.ndarray, radius: Optional[float] = None, threshold: float = 1e-3) -> int:
    """Local maxima of a tabulated density over grid neighbours within ``radius``."""
    points = np.asarray(points, dtype=float).reshape(len(weights), -1)
    if len(weights) < 2:
        return int(len(weights))
    tree = cKDTree(points)
    radius = radius or _neighbour_radius(points, tree)
    floor = threshold * float(np.max(weights))
    modes = 0
    for i, neighbours in enumerate(tree.query_ball_point(points, radius)):
        if weights[i] < floor:
            continue
        others = [j for j in neighbours if j != i]
        if all(weights[i] > weights[j] or (weights[i] == weights[j] and i < j) for j in others):
            modes += 1
    return modes


def conditional_clusters(
    points: np.ndarray, weights: np.ndarray, radius: Optional[float] = None, threshold: float = 1e-6
) -> np.ndarray:
    """Masses of the connected clusters of the support, largest first."""
    points = np.asarray(points, dtype=float).reshape(len(weights), -1)
    keep = np.flatnonzero(weights > threshold * float(np.max(weights)))
    if keep.size == 0:
        return np.zeros(0)
    support = points[keep]
    if radius is None:
        radius = _neighbour_radius(points, cKDTree(points)) if len(points) > 1 else 1.0
    pairs = cKDTree(support).query_pairs(radius, output_type="ndarray")
    graph = sparse.coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(keep.size, keep.size))
    _, labels = csgraph.connected_components(graph, directed=False)
    masses = np.bincount(labels, weights=weights[keep])
    return np.sort(masses)[::-1]


def mass_outside_top(points: np.ndarray, weights: np.ndarray, keep: int = 2, **kwargs) -> float:
    """Share of the conditional mass outside its ``keep`` heaviest clusters."""
    masses = conditional_clusters(points, weights, **kwargs)
    total = float(np.sum(weights))
    return 0.0 if total == 0 else max(0.0, 1.0 - float(np.sum(masses[:keep])) / total)
