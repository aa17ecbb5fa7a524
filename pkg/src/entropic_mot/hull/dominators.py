from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ..common import HullConfig, parallel_map
from ..entropic.core import EntropicProblem, KernelStats, kernel_stats
from ..model.measures import DualState, MotInstance
from .concave import hull_at

logger = logging.getLogger(__name__)

DOMINATOR_MODES = ("concave_hull", "sup")


@dataclass(frozen=True)
class DominatorReport:
    """Dual upper bounds mu[phi_bar] + nu[psi] against the entropic primal P_eps[c]."""

    epsilon: float
    primal_value: float
    hull_dual: Optional[float]
    sup_dual: Optional[float]

    @property
    def hull_gap(self) -> Optional[float]:
        return None if self.hull_dual is None else self.hull_dual - self.primal_value

    @property
    def sup_gap(self) -> Optional[float]:
        return None if self.sup_dual is None else self.sup_dual - self.primal_value

    def gap(self, mode: str) -> Optional[float]:
        return self.hull_gap if mode == "concave_hull" else self.sup_gap

    def to_document(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "primal_value": self.primal_value,
            "hull_dual": self.hull_dual,
            "sup_dual": self.sup_dual,
            "hull_gap": self.hull_gap,
            "sup_gap": self.sup_gap,
        }


def cost_row(inst: MotInstance, xi: int) -> np.ndarray:
    """c(x_i, y) for every y of the instance grid."""
    n_y = inst.nu.size
    x_rep = np.repeat(inst.mu.points[xi : xi + 1], n_y, axis=0)
    return inst.cost.evaluate_pairs(x_rep, inst.nu.points, np.full(n_y, xi), np.arange(n_y))


def duality_gap_dominators(
    prob: EntropicProblem,
    state: DualState,
    stats: Optional[KernelStats] = None,
    modes: Sequence[str] = DOMINATOR_MODES,
    config: Optional[HullConfig] = None,
    threads: int = 1,
) -> DominatorReport:
    """Complete psi into a superhedging phi_bar over the whole y grid and measure the gap."""
    unknown = set(modes) - set(DOMINATOR_MODES)
    if unknown:
        raise ValueError(f"unknown dominator mode(s) {sorted(unknown)}")
    inst = prob.inst
    stats = stats or kernel_stats(prob, state)
    grid = inst.nu.points
    nu_term = float(inst.nu.weights @ state.psi)

    def evaluate(xi: int) -> tuple[float, float]:
        f = cost_row(inst, xi) - state.psi
        top = float(np.max(f))
        if "concave_hull" not in modes:
            return top, np.nan
        return top, hull_at(grid, f, inst.mu.points[xi], state.h[xi], config).value

    rows = parallel_map(evaluate, range(inst.mu.size), threads)
    sup_phi = np.array([r[0] for r in rows])
    hull_phi = np.array([r[1] for r in rows])
    report = DominatorReport(
        epsilon=prob.epsilon,
        primal_value=stats.primal_value,
        hull_dual=float(inst.mu.weights @ hull_phi) + nu_term if "concave_hull" in modes else None,
        sup_dual=float(inst.mu.weights @ sup_phi) + nu_term if "sup" in modes else None,
    )
    logger.info("dominators at eps=%.3g: hull gap %s, sup gap %s", prob.epsilon, report.hull_gap, report.sup_gap)
    return report
