from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional

from ..common import StopRule, SweepLog, SweepRecord
from ..entropic.core import EntropicProblem, KernelStats, kernel_stats, update_h_all, update_psi
from ..model.measures import DualState

logger = logging.getLogger(__name__)

# (grad_error, iteration, first_error) -> stop early
StopHook = Callable[[float, int, float], bool]
SweepCallback = Callable[[int, DualState, KernelStats], None]


class Sweep(NamedTuple):
    state: DualState
    h_iters: int


@dataclass
class SinkhornResult:
    state: DualState
    log: SweepLog
    converged: bool
    iterations: int
    stats: Optional[KernelStats] = None


def sinkhorn_sweep(prob: EntropicProblem, state: DualState) -> Sweep:
    """psi block, then the joint (phi, h) block for every x."""
    half = state.replace(psi=update_psi(prob, state))
    block = update_h_all(prob, half)
    return Sweep(state=half.replace(phi=block.phi, h=block.h), h_iters=int(block.iterations.sum()))


def run_sinkhorn(
    prob: EntropicProblem,
    state: DualState,
    stop: StopRule,
    callback: Optional[SweepCallback] = None,
    should_stop: Optional[StopHook] = None,
) -> SinkhornResult:
    log = SweepLog()
    if stop.max_iters <= 0:
        return SinkhornResult(state=state, log=log, converged=False, iterations=0)

    nu_weights = prob.inst.nu.weights
    started = time.perf_counter()
    first_error: Optional[float] = None
    stats: Optional[KernelStats] = None
    converged = False
    iteration = 0
    for iteration in range(1, stop.max_iters + 1):
        sweep = sinkhorn_sweep(prob, state)
        state = sweep.state
        stats = kernel_stats(prob, state)
        error = stats.y_error(nu_weights)
        log.append(SweepRecord(iteration, time.perf_counter() - started, error, stats.dual_value, sweep.h_iters))
        logger.debug("sinkhorn it=%d err=%.3e V=%.12g h_iters=%d", iteration, error, stats.dual_value, sweep.h_iters)
        if callback is not None:
            callback(iteration, state, stats)
        if first_error is None:
            first_error = error
        if error <= stop.grad_tol:
            converged = True
            break
        if should_stop is not None and should_stop(error, iteration, first_error):
            break
    else:
        logger.warning("sinkhorn reached %d sweeps at eps=%.3g, error %.3e", stop.max_iters, prob.epsilon, log.last_error)

    violations = log.monotone_violations()
    if violations:
        logger.warning("dual value increased on %d sweeps at eps=%.3g", violations, prob.epsilon)
    return SinkhornResult(state=state, log=log, converged=converged, iterations=iteration, stats=stats)
