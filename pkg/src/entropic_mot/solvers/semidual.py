from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from ..common import HullConfig, SemidualConfig, parallel_map
from ..errors import OutOfHullError
from ..hull.concave import HullResult, hull_at
from ..model.measures import MotInstance

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class SemidualIterate:
    psi: np.ndarray
    value: float
    subgradient: np.ndarray
    step: int
    hull_gradients: np.ndarray

    @property
    def subgradient_norm(self) -> float:
        return float(np.sum(np.abs(self.subgradient)))


@dataclass
class SemidualResult:
    best: SemidualIterate
    last: SemidualIterate
    history: List[tuple] = field(default_factory=list)

    CSV_HEADER = ("n", "value", "subgrad_l1", "seconds")


def semidual_value_and_subgradient(
    inst: MotInstance,
    psi: np.ndarray,
    gradient_guesses: Optional[np.ndarray] = None,
    config: Optional[HullConfig] = None,
    threads: int = 1,
    cost: Optional[np.ndarray] = None,
    step: int = 0,
) -> SemidualIterate:
    """V(psi) = sum_x mu_x (c(x, .) - psi)_conc(x) + nu[psi] and the subgradient nu - sum_x mu_x lambda(x)."""
    psi = np.asarray(psi, dtype=float)
    cost = inst.cost_matrix() if cost is None else cost
    grid = inst.nu.points
    mu = inst.mu

    def evaluate(xi: int) -> HullResult:
        guess = None if gradient_guesses is None else gradient_guesses[xi]
        try:
            return hull_at(grid, cost[xi] - psi, mu.points[xi], guess, config)
        except OutOfHullError as exc:
            raise OutOfHullError(f"x not in the convex hull of grid. (x index {xi})") from exc

    hulls = parallel_map(evaluate, range(mu.size), threads)
    contact = np.zeros(inst.nu.size)
    for xi, result in enumerate(hulls):
        np.add.at(contact, result.support, mu.weights[xi] * result.barycentric_coefficients)
    value = float(mu.weights @ np.array([r.value for r in hulls]) + inst.nu.weights @ psi)
    return SemidualIterate(
        psi=psi,
        value=value,
        subgradient=inst.nu.weights - contact,
        step=step,
        hull_gradients=np.array([r.gradient for r in hulls]),
    )


def run_subgradient_descent(
    inst: MotInstance,
    psi0: np.ndarray,
    config: Optional[SemidualConfig] = None,
    hull_config: Optional[HullConfig] = None,
    threads: int = 1,
    callback: Optional[Callable[[SemidualIterate], None]] = None,
) -> SemidualResult:
    """Subgradient descent with steps c0 / sqrt(n + 1), keeping the best iterate."""
    config = config or SemidualConfig()
    cost = inst.cost_matrix()
    started = time.perf_counter()
    current = semidual_value_and_subgradient(inst, psi0, None, hull_config, threads, cost)
    best = current
    result = SemidualResult(best=best, last=current)
    result.history.append((0, current.value, current.subgradient_norm, time.perf_counter() - started))

    for n in range(config.n_max):
        if current.subgradient_norm <= config.tol:
            break
        psi = current.psi - (config.c0 / np.sqrt(n + 1.0)) * current.subgradient
        current = semidual_value_and_subgradient(inst, psi, current.hull_gradients, hull_config, threads, cost, n + 1)
        if current.value < best.value:
            best = current
        result.history.append((n + 1, current.value, current.subgradient_norm, time.perf_counter() - started))
        if callback is not None:
            callback(current)
        if (n + 1) % 1000 == 0:
            logger.info("semidual n=%d V=%.10g best=%.10g", n + 1, current.value, best.value)

    result.best = best
    result.last = current
    return result
