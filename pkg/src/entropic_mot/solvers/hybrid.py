from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence, Union

import numpy as np

from ..common import ScheduleConfig, SolverSettings, SOLVER_CHOICES, StopRule, SweepLog
from ..entropic.core import (
    ActiveSets,
    EntropicProblem,
    KernelStats,
    kernel_entries,
    kernel_stats,
    nearest_indices,
    prolong_active,
    truncate_kernel,
)
from ..errors import InfeasibleMartingaleError, InstanceError, IterationLimitError
from ..hull.dominators import DOMINATOR_MODES, DominatorReport, duality_gap_dominators
from ..model.measures import DiscreteMeasure, DualState, MotInstance, check_convex_order_1d, validate_instance
from .newton import make_penalization, run_newton
from .sinkhorn import StopHook, run_sinkhorn

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class GridFamily:
    """Analytic marginals that can be tabulated at any number of points per axis."""

    name: str
    dim: int
    build: Callable[[int], MotInstance]

    def __call__(self, size: int) -> MotInstance:
        return self.build(size)


InstanceSource = Union[MotInstance, GridFamily]


@dataclass
class StageReport:
    index: int
    epsilon: float
    grid: tuple
    solver: str
    iterations: int
    converged: bool
    grad_error: Optional[float]
    seconds: float
    active_entries: int
    log: SweepLog = field(default_factory=SweepLog)
    switched_at: Optional[int] = None
    dropped_mass: float = 0.0
    error: Optional[str] = None

    def to_document(self) -> dict:
        return {
            "index": self.index,
            "epsilon": self.epsilon,
            "grid": list(self.grid),
            "solver": self.solver,
            "iterations": self.iterations,
            "converged": self.converged,
            "grad_error": self.grad_error,
            "seconds": self.seconds,
            "active_entries": self.active_entries,
            "switched_at": self.switched_at,
            "dropped_mass": self.dropped_mass,
            "error": self.error,
        }


@dataclass
class SolveReport:
    instance: MotInstance
    problem: EntropicProblem
    state: DualState
    stats: KernelStats
    stages: List[StageReport]
    solver: str
    grid_size: Optional[int] = None
    dominators: Optional[DominatorReport] = None
    seconds: float = 0.0

    @property
    def epsilon(self) -> float:
        return self.problem.epsilon

    @property
    def converged(self) -> bool:
        return bool(self.stages) and self.stages[-1].converged and self.stages[-1].error is None

    @property
    def grad_error(self) -> float:
        return self.stats.y_error(self.instance.nu.weights)

    def to_document(self) -> dict:
        return {
            "solver": self.solver,
            "epsilon": self.epsilon,
            "grid": [self.instance.mu.size, self.instance.nu.size],
            "converged": self.converged,
            "seconds": self.seconds,
            "stats": {
                "primal_value": self.stats.primal_value,
                "dual_value": self.stats.dual_value,
                "entropy": self.stats.entropy,
                "mass": self.stats.mass,
                "y_error": self.grad_error,
                "x_error": self.stats.x_error(self.instance.mu.weights),
                "martingale_error": self.stats.martingale_error(),
            },
            "dominators": None if self.dominators is None else self.dominators.to_document(),
            "stages": [stage.to_document() for stage in self.stages],
        }


def prolong_duals(
    old_state: DualState,
    old_mu: DiscreteMeasure,
    old_nu: DiscreteMeasure,
    new_mu: DiscreteMeasure,
    new_nu: DiscreteMeasure,
) -> DualState:
    """Each new point copies phi/psi/h from its nearest old point."""
    if old_mu.dim != new_mu.dim or old_nu.dim != new_nu.dim:
        raise InstanceError("cannot prolong duals across dimensions")
    x_map = nearest_indices(old_mu.points, new_mu.points)
    y_map = nearest_indices(old_nu.points, new_nu.points)
    return DualState(phi=old_state.phi[x_map].copy(), psi=old_state.psi[y_map].copy(), h=old_state.h[x_map].copy())


def switch_rule(schedule: ScheduleConfig) -> StopHook:
    def should_switch(error: float, iteration: int, first_error: float) -> bool:
        if iteration >= schedule.switch_max_iters:
            return True
        if first_error < schedule.small_error:
            return error <= first_error / schedule.small_error_ratio
        return error <= first_error / schedule.switch_ratio

    return should_switch


def check_instance(inst: MotInstance) -> None:
    violations = validate_instance(inst)
    if violations:
        raise InstanceError("; ".join(v.message for v in violations))
    if inst.dim == 1:
        order = check_convex_order_1d(inst.mu, inst.nu)
        if not order.ordered:
            raise InstanceError(
                f"marginals are not in convex order (call gap {order.worst_violation:.3e} at strike "
                f"{order.worst_strike:.6g}); repair nu first"
            )


def solve_stage(
    prob: EntropicProblem, state: DualState, solver: str, tol: float, settings: SolverSettings
) -> tuple[DualState, SweepLog, bool, Optional[int]]:
    schedule = settings.schedule
    stop = StopRule(grad_tol=tol, max_iters=schedule.stage_max_iters)
    log = SweepLog()
    switched_at: Optional[int] = None
    if solver in ("bregman", "hybrid"):
        hook = switch_rule(schedule) if solver == "hybrid" else None
        bregman = run_sinkhorn(prob, state, stop, should_stop=hook)
        log.extend(bregman.log)
        state = bregman.state
        if solver == "bregman" or bregman.converged:
            return state, log, bregman.converged, None
        switched_at = len(log)
    newton_cfg = replace(settings.newton, grad_tol=tol)
    penalized = prob.with_penalization(make_penalization(newton_cfg, prob.inst.nu.weights, state.psi))
    newton = run_newton(penalized, state.psi, newton_cfg, warm=state.h)
    log.extend(newton.log)
    return newton.state, log, newton.converged, switched_at


def run_hybrid(
    source: InstanceSource,
    settings: Optional[SolverSettings] = None,
    solver: Optional[str] = None,
    warm_start: Optional[SolveReport] = None,
    dominator_modes: Sequence[str] = DOMINATOR_MODES,
    validate: bool = True,
) -> SolveReport:
    """Epsilon-scaling solve with grid refinement, truncation and the Bregman to Newton switch."""
    settings = settings or SolverSettings()
    schedule = settings.schedule
    solver = solver or schedule.solver
    if solver not in SOLVER_CHOICES:
        raise ValueError(f"solver must be one of {SOLVER_CHOICES}, got '{solver}'")
    family = source if isinstance(source, GridFamily) else None
    started = time.perf_counter()

    epsilons = schedule.epsilons()
    active: Optional[ActiveSets] = None
    if warm_start is not None:
        epsilons = [e for e in epsilons if e < warm_start.epsilon * (1.0 - 1e-12)] or [schedule.eps_target]
        inst, state, active = warm_start.instance, warm_start.state, warm_start.problem.active
        grid_size = warm_start.grid_size
    else:
        grid_size = schedule.grid_size(epsilons[0], family.dim) if family else None
        inst = family(grid_size) if family else source
        if validate:
            check_instance(inst)
        state = DualState.zeros(inst.mu.size, inst.nu.size, inst.dim)

    stages: List[StageReport] = []
    prob = EntropicProblem(inst, epsilons[0], active, None, settings.entropic)
    for k, eps in enumerate(epsilons):
        last = k == len(epsilons) - 1
        if family is not None:
            wanted = schedule.grid_size(eps, family.dim)
            if wanted != grid_size:
                refined = family(wanted)
                if validate:
                    check_instance(refined)
                state = prolong_duals(state, inst.mu, inst.nu, refined.mu, refined.nu)
                if active is not None:
                    active = prolong_active(active, inst.mu, inst.nu, refined.mu, refined.nu)
                logger.info("refined grid %s -> %s points per axis at eps=%.3g", grid_size, wanted, eps)
                inst, grid_size = refined, wanted
        prob = EntropicProblem(inst, eps, active, None, settings.entropic)
        tol = schedule.final_grad_tol if last else schedule.stage_grad_tol
        stage_start = time.perf_counter()
        report = StageReport(
            index=k,
            epsilon=eps,
            grid=(inst.mu.size, inst.nu.size),
            solver=solver,
            iterations=0,
            converged=False,
            grad_error=None,
            seconds=0.0,
            active_entries=prob.nnz,
        )
        stages.append(report)
        try:
            state, log, converged, switched_at = solve_stage(prob, state, solver, tol, settings)
        except (InfeasibleMartingaleError, IterationLimitError) as exc:
            report.error = str(exc)
            report.seconds = time.perf_counter() - stage_start
            logger.error("stage %d (eps=%.3g) failed: %s", k, eps, exc)
            break
        report.log = log
        report.iterations = len(log)
        report.converged = converged
        report.grad_error = log.last_error
        report.switched_at = switched_at
        report.seconds = time.perf_counter() - stage_start
        logger.info(
            "stage %d eps=%.3g grid=%s %s: %d iterations, error %s, %.2fs",
            k,
            eps,
            report.grid,
            "converged" if converged else "not converged",
            report.iterations,
            report.grad_error,
            report.seconds,
        )

        if (
            not last
            and converged
            and schedule.truncate
            and eps <= settings.entropic.truncation_max_epsilon
        ):
            p = kernel_entries(prob, state)
            active = truncate_kernel(prob, state, settings.entropic.truncation_factor)
            kept = active.to_mask()[prob.rows, prob.cols]
            report.dropped_mass = float(np.sum(p[~kept]))

    stats = kernel_stats(prob, state)
    dominators = None
    if dominator_modes and state.is_finite():
        dominators = duality_gap_dominators(
            prob, state, stats, dominator_modes, settings.hull, settings.runtime.threads
        )
    return SolveReport(
        instance=inst,
        problem=prob,
        state=state,
        stats=stats,
        stages=stages,
        solver=solver,
        grid_size=grid_size,
        dominators=dominators,
        seconds=time.perf_counter() - started,
    )
