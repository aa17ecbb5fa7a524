from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from ..common import RepairConfig, ScheduleConfig, SolverSettings
from ..entropic.core import EntropicProblem, Penalization
from ..errors import InstanceError
from ..model.measures import DiscreteMeasure, MotInstance, check_convex_order_1d
from ..solvers.newton import NewtonResult, penalty_weights, run_newton

logger = logging.getLogger(__name__)

_PAD_FRACTION = 0.05
_PRUNE = 1e-14
_WARMUP_TOL = 1e-3


@dataclass
class RepairStage:
    alpha: float
    fstar_gap: float
    grad_error: float
    iterations: int


@dataclass
class RepairResult:
    nu_repaired: DiscreteMeasure
    fstar_gap: float
    alpha_final: float
    extrapolated: Optional[np.ndarray]
    grid: DiscreteMeasure
    stages: List[RepairStage] = field(default_factory=list)

    def repaired_instance(self, inst: MotInstance) -> MotInstance:
        return MotInstance(mu=inst.mu, nu=self.nu_repaired, cost=inst.cost)


@dataclass
class SlopeResult:
    alphas: List[float]
    slopes: np.ndarray
    drifts: List[float]
    extrapolated: Optional[np.ndarray]

    @property
    def diagnostic(self) -> float:
        return self.drifts[-1] if self.drifts else float("nan")


def fstar_gap(nu_l: np.ndarray, nu: np.ndarray, a_weights: np.ndarray) -> float:
    """Convex conjugate of the quadratic penalty at nu_l - nu."""
    diff = nu_l - nu
    return 0.5 * float(np.sum(diff * diff / a_weights))


def extended_target(inst: MotInstance) -> DiscreteMeasure:
    """nu on supp(nu) united with supp(mu) and a padding frame, with zero weight on added points."""
    if inst.cost.kind == "tabulated":
        return inst.nu
    union = np.vstack([inst.nu.points, inst.mu.points])
    lo, hi = union.min(axis=0), union.max(axis=0)
    pad = _PAD_FRACTION * np.where(hi > lo, hi - lo, 1.0)
    if inst.dim == 1:
        frame = np.array([lo - pad, hi + pad])
    else:
        corners = np.array(np.meshgrid(*[(l, h) for l, h in zip(lo - pad, hi + pad)], indexing="ij"))
        frame = corners.reshape(inst.dim, -1).T
    candidates = np.vstack([inst.mu.points, frame])
    known = {tuple(p) for p in inst.nu.points}
    extra = [p for p in candidates if tuple(p) not in known]
    extra = np.unique(np.array(extra), axis=0) if extra else np.zeros((0, inst.dim))
    points = np.vstack([inst.nu.points, extra])
    weights = np.concatenate([inst.nu.weights, np.zeros(len(extra))])
    return DiscreteMeasure.from_arrays(points, weights)


def floored_weights(choice: str, target: np.ndarray) -> np.ndarray:
    weights = penalty_weights(choice, target)
    positive = weights[weights > 0]
    floor = positive.min() if positive.size else 1.0
    return np.where(weights > 0, weights, floor)


def _penalized_path(
    inst: MotInstance,
    a_weights: np.ndarray,
    alphas: Sequence[float],
    epsilon: float,
    grad_tol: float,
    settings: SolverSettings,
) -> Iterator[Tuple[float, NewtonResult]]:
    """Warm-up by epsilon scaling at the first alpha, then one penalized solve per alpha."""
    newton_cfg = settings.newton
    prob = EntropicProblem(inst, 1.0, config=settings.entropic)
    psi = np.zeros(inst.nu.size)
    h = np.zeros((inst.mu.size, inst.dim))
    warmup = ScheduleConfig(eps_start=max(1.0, epsilon), eps_target=epsilon).epsilons()[:-1]
    for eps in warmup:
        stage = prob.with_epsilon(eps).with_penalization(Penalization(alphas[0], a_weights))
        result = run_newton(stage, psi, replace(newton_cfg, grad_tol=_WARMUP_TOL), warm=h)
        psi, h = result.state.psi, result.state.h
    base = prob.with_epsilon(epsilon)
    for alpha in alphas:
        stage = base.with_penalization(Penalization(alpha, a_weights))
        result = run_newton(stage, psi, replace(newton_cfg, grad_tol=grad_tol), warm=h)
        if not result.converged:
            logger.warning("penalized solve at alpha=%.3g stopped before tolerance", alpha)
        psi, h = result.state.psi, result.state.h
        yield alpha, result


def repair_marginals(
    inst: MotInstance,
    a_weights: Optional[str] = None,
    alpha_schedule: Optional[Sequence[float]] = None,
    settings: Optional[SolverSettings] = None,
) -> RepairResult:
    """Replace nu by the y-marginal of the penalized entropic optimum as alpha decreases."""
    settings = settings or SolverSettings()
    config: RepairConfig = settings.repair
    choice = a_weights or config.a_weights
    alphas = list(alpha_schedule) if alpha_schedule is not None else list(config.alphas)
    if not alphas or any(a <= 0 for a in alphas) or any(b >= a for a, b in zip(alphas, alphas[1:])):
        raise InstanceError("alpha schedule must be positive and strictly decreasing")
    if inst.mu.dim != inst.nu.dim:
        raise InstanceError(f"dimension mismatch: mu is {inst.mu.dim}D, nu is {inst.nu.dim}D")

    grid = extended_target(inst)
    extended = MotInstance(mu=inst.mu, nu=grid, cost=inst.cost)
    target = grid.weights
    weights = floored_weights(choice, target)

    stages: List[RepairStage] = []
    marginals: List[np.ndarray] = []
    for alpha, result in _penalized_path(extended, weights, alphas, config.epsilon, config.grad_tol, settings):
        marginal = result.implied.y_marginal
        gap = fstar_gap(marginal, target, weights)
        stages.append(RepairStage(alpha, gap, result.log.last_error or 0.0, result.iterations))
        marginals.append(marginal)
        logger.info("repair alpha=%.3g f* gap=%.6e", alpha, gap)
        if len(stages) >= 2:
            previous = stages[-2].fstar_gap
            if abs(gap - previous) <= config.stable_change * max(previous, 1e-300):
                break

    final = marginals[-1]
    keep = final > _PRUNE * final.max()
    repaired = DiscreteMeasure.from_arrays(grid.points[keep], final[keep] / final[keep].sum())
    extrapolated = None
    if len(marginals) >= 2:
        a1, a2 = stages[-2].alpha, stages[-1].alpha
        extrapolated = marginals[-1] - a2 * (marginals[-2] - marginals[-1]) / (a1 - a2)
    return RepairResult(
        nu_repaired=repaired,
        fstar_gap=stages[-1].fstar_gap,
        alpha_final=stages[-1].alpha,
        extrapolated=extrapolated,
        grid=grid,
        stages=stages,
    )


def penalization_slope(
    inst: MotInstance,
    a_weights: Optional[str] = None,
    alpha_schedule: Optional[Sequence[float]] = None,
    settings: Optional[SolverSettings] = None,
) -> SlopeResult:
    """(nu_alpha - nu) / alpha along the schedule and the drift between consecutive alphas."""
    settings = settings or SolverSettings()
    config = settings.repair
    choice = a_weights or config.a_weights
    alphas = list(alpha_schedule) if alpha_schedule is not None else list(config.alphas)
    if inst.dim == 1 and not check_convex_order_1d(inst.mu, inst.nu).ordered:
        raise InstanceError("penalization slope needs marginals in convex order")
    weights = floored_weights(choice, inst.nu.weights)

    slopes: List[np.ndarray] = []
    for alpha, result in _penalized_path(inst, weights, alphas, config.epsilon, config.grad_tol, settings):
        slopes.append((result.implied.y_marginal - inst.nu.weights) / alpha)
    drifts = [float(np.max(np.abs(b - a))) for a, b in zip(slopes, slopes[1:])]
    extrapolated = None
    if len(slopes) >= 2:
        a1, a2 = alphas[len(slopes) - 2], alphas[len(slopes) - 1]
        extrapolated = slopes[-1] - a2 * (slopes[-2] - slopes[-1]) / (a1 - a2)
    return SlopeResult(alphas=alphas[: len(slopes)], slopes=np.array(slopes), drifts=drifts, extrapolated=extrapolated)
