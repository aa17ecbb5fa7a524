"""Truncated Newton on the implied semi-dual psi -> min_{phi, h} V_eps(phi, psi, h).

Iterates follow psi <- psi - t * p where p approximately solves H p = g by
preconditioned conjugate gradients, and t satisfies the strong Wolfe conditions.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Any, Callable, NamedTuple, Optional, Tuple

import numpy as np

from ..common import NewtonConfig, SweepLog, SweepRecord
from ..entropic.core import EntropicProblem, Penalization, kernel_entries, segment_sum, update_h_all
from ..errors import IterationLimitError
from ..model.measures import DualState

logger = logging.getLogger(__name__)

_DIAG_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class ImpliedState:
    psi: np.ndarray
    phi: np.ndarray
    h: np.ndarray
    p: np.ndarray
    row_mass: np.ndarray
    y_marginal: np.ndarray
    b_inv: np.ndarray
    h_iters: int

    def dual_state(self) -> DualState:
        return DualState(phi=self.phi, psi=self.psi, h=self.h)


class CgResult(NamedTuple):
    direction: np.ndarray
    iterations: int
    residual: float
    negative_curvature: bool


class LineSearchResult(NamedTuple):
    step: float
    evaluations: int
    converged: bool
    value: float
    gradient: Optional[np.ndarray]
    aux: Any


@dataclass
class NewtonResult:
    state: DualState
    log: SweepLog
    converged: bool
    iterations: int
    implied: ImpliedState


def penalty_weights(choice: str, nu_weights: np.ndarray, psi0: Optional[np.ndarray] = None, floor: float = 1e-8) -> np.ndarray:
    if choice == "ones":
        return np.ones_like(nu_weights)
    if choice == "nu":
        return nu_weights.copy()
    if choice == "nu2":
        return nu_weights**2
    if choice == "nu_over_psi0":
        if psi0 is None:
            raise ValueError("a_weights 'nu_over_psi0' needs a reference psi")
        return nu_weights / np.maximum(np.abs(psi0), floor)
    raise ValueError(f"unknown a_weights choice '{choice}'")


def make_penalization(config: NewtonConfig, nu_weights: np.ndarray, psi_ref: Optional[np.ndarray] = None) -> Optional[Penalization]:
    if config.alpha <= 0:
        return None
    weights = penalty_weights(config.a_weights, nu_weights, psi_ref, config.psi0_floor)
    anchor = None
    if config.anchor == "psi0" and psi_ref is not None:
        anchor = np.array(psi_ref, dtype=float, copy=True)
    return Penalization(alpha=config.alpha, a_weights=weights, anchor=anchor)


def implicitation(
    prob: EntropicProblem, psi: np.ndarray, warm: ImpliedState | np.ndarray | None = None
) -> ImpliedState:
    """Minimize V_eps over (phi, h) at fixed psi and cache what derivatives need.

    ``warm`` is a previous implied state or an (n_x, d) array of h values.
    """
    if isinstance(warm, ImpliedState):
        warm_h = warm.h
    else:
        warm_h = np.zeros((prob.n_x, prob.dim)) if warm is None else np.asarray(warm, dtype=float)
    block = update_h_all(prob, DualState(phi=np.zeros(prob.n_x), psi=psi, h=warm_h))
    p = kernel_entries(prob, DualState(phi=block.phi, psi=psi, h=block.h))
    indptr = prob.active.indptr
    second = segment_sum(p[:, None, None] * prob.disp[:, :, None] * prob.disp[:, None, :], indptr)
    return ImpliedState(
        psi=psi,
        phi=block.phi,
        h=block.h,
        p=p,
        row_mass=segment_sum(p, indptr),
        y_marginal=np.bincount(prob.cols, weights=p, minlength=prob.n_y),
        b_inv=np.linalg.pinv(second, hermitian=True),
        h_iters=int(block.iterations.sum()),
    )


def tilde_value(prob: EntropicProblem, istate: ImpliedState) -> float:
    """Penalized implied objective."""
    mu, nu = prob.inst.mu, prob.inst.nu
    value = float(mu.weights @ istate.phi + nu.weights @ istate.psi + prob.epsilon * np.sum(istate.p))
    if prob.penalization is not None:
        value += prob.penalization.value(istate.psi)
    return value


def grad_tilde_v(prob: EntropicProblem, istate: ImpliedState) -> np.ndarray:
    grad = prob.inst.nu.weights - istate.y_marginal
    if prob.penalization is not None:
        grad = grad + prob.penalization.gradient(istate.psi)
    return grad


def hvp_tilde_v(prob: EntropicProblem, istate: ImpliedState, v: np.ndarray) -> np.ndarray:
    """Schur complement of the (phi, h) blocks applied to v; h-blocks are inverted exactly per x."""
    indptr = prob.active.indptr
    pv = istate.p * v[prob.cols]
    a = segment_sum(pv, indptr) / istate.row_mass
    m = segment_sum(pv[:, None] * prob.disp, indptr)
    b = np.einsum("kij,kj->ki", istate.b_inv, m)
    back = istate.p * (a[prob.rows] + np.einsum("kd,kd->k", prob.disp, b[prob.rows]))
    out = (istate.y_marginal * v - np.bincount(prob.cols, weights=back, minlength=prob.n_y)) / prob.epsilon
    if prob.penalization is not None:
        out = out + prob.penalization.alpha * prob.penalization.a_weights * v
    return out


def hessian_diagonal(prob: EntropicProblem, istate: ImpliedState) -> np.ndarray:
    q = istate.p * istate.p
    own = np.bincount(prob.cols, weights=q / istate.row_mass[prob.rows], minlength=prob.n_y)
    quad = np.einsum("ki,kij,kj->k", prob.disp, istate.b_inv[prob.rows], prob.disp)
    mart = np.bincount(prob.cols, weights=q * quad, minlength=prob.n_y)
    diag = (istate.y_marginal - own - mart) / prob.epsilon
    if prob.penalization is not None:
        diag = diag + prob.penalization.alpha * prob.penalization.a_weights
    floor = _DIAG_FLOOR * max(float(np.max(np.abs(diag))), 1e-300)
    return np.maximum(diag, floor)


def cg_solve(
    hvp: Callable[[np.ndarray], np.ndarray],
    grad: np.ndarray,
    precond_diag: np.ndarray,
    forcing: float,
    max_iters: int = 200,
) -> CgResult:
    """Preconditioned CG for H p = g, stopping at |H p - g| <= forcing * |g|."""
    x = np.zeros_like(grad)
    r = grad.astype(float, copy=True)
    z = r / precond_diag
    d = z.copy()
    rz = float(r @ z)
    residual = float(np.linalg.norm(r))
    target = forcing * residual
    if residual == 0.0:
        return CgResult(x, 0, 0.0, False)
    for k in range(1, max_iters + 1):
        hd = hvp(d)
        curvature = float(d @ hd)
        if curvature <= 0.0:
            logger.warning("nonpositive curvature %.3e at CG iteration %d", curvature, k)
            if k == 1:
                return CgResult(z, 0, residual, True)
            return CgResult(x, k - 1, residual, True)
        step = rz / curvature
        x += step * d
        r -= step * hd
        residual = float(np.linalg.norm(r))
        if residual <= target:
            return CgResult(x, k, residual, False)
        z = r / precond_diag
        rz_next = float(r @ z)
        d = z + (rz_next / rz) * d
        rz = rz_next
    return CgResult(x, max_iters, residual, False)


EvalFn = Callable[[np.ndarray], Tuple]


def wolfe_line_search(
    eval_fn: EvalFn,
    x: np.ndarray,
    direction: np.ndarray,
    g0: np.ndarray,
    f0: Optional[float] = None,
    c1: float = 1e-4,
    c2: float = 0.9,
    max_bisections: int = 30,
    max_doublings: int = 30,
) -> LineSearchResult:
    """Strong Wolfe step along x - t * direction by bracketing and bisection.

    ``eval_fn(point)`` returns ``(value, gradient, *aux)``; a non-finite value marks
    the point as too far.
    """
    if f0 is None:
        f0 = float(eval_fn(x)[0])
    slope = float(g0 @ direction)
    lo, hi = 0.0, np.inf
    t = 1.0
    evaluations = 0
    bisections = doublings = 0
    best: Optional[Tuple[float, float, Optional[np.ndarray], Any]] = None

    while True:
        value, gradient, *aux = eval_fn(x - t * direction)
        evaluations += 1
        extra = aux[0] if aux else None
        if not np.isfinite(value) or value > f0 - c1 * t * slope or gradient is None:
            hi = t
        else:
            if best is None or value < best[1]:
                best = (t, float(value), gradient, extra)
            dd = float(gradient @ direction)
            if abs(dd) <= c2 * slope:
                return LineSearchResult(t, evaluations, True, float(value), gradient, extra)
            if dd > 0:
                lo = t
                if not np.isfinite(hi):
                    if doublings >= max_doublings:
                        break
                    doublings += 1
                    t *= 2.0
                    continue
            else:
                hi = t
        if bisections >= max_bisections:
            break
        bisections += 1
        t = 0.5 * (lo + hi)

    if best is None:
        logger.warning("line search found no Armijo point after %d evaluations", evaluations)
        return LineSearchResult(0.0, evaluations, False, float(f0), None, None)
    logger.debug("line search exhausted, keeping Armijo step %.3e", best[0])
    return LineSearchResult(best[0], evaluations, False, best[1], best[2], best[3])


def run_newton(
    prob: EntropicProblem,
    psi0: np.ndarray,
    config: NewtonConfig,
    callback: Optional[Callable[[int, ImpliedState], None]] = None,
    warm: ImpliedState | np.ndarray | None = None,
) -> NewtonResult:
    log = SweepLog()
    started = time.perf_counter()
    current = implicitation(prob, np.asarray(psi0, dtype=float), warm)
    value = tilde_value(prob, current)
    grad = grad_tilde_v(prob, current)
    converged = False
    iteration = 0

    def evaluate(point: np.ndarray):
        try:
            trial = implicitation(prob, point, current)
        except IterationLimitError:
            return np.inf, None, None
        return tilde_value(prob, trial), grad_tilde_v(prob, trial), trial

    for iteration in range(0, config.max_outer_iters + 1):
        error = float(np.sum(np.abs(grad)))
        if error <= config.grad_tol:
            converged = True
            break
        if iteration == config.max_outer_iters:
            logger.warning("newton reached %d iterations at eps=%.3g, error %.3e", iteration, prob.epsilon, error)
            break
        gnorm = float(np.linalg.norm(grad))
        forcing = min(config.forcing_cap, np.sqrt(gnorm))
        precond = hessian_diagonal(prob, current)
        cg = cg_solve(lambda v: hvp_tilde_v(prob, current, v), grad, precond, forcing, config.cg_max_iters)
        direction = cg.direction
        if not float(grad @ direction) > 0.0:
            direction = grad / precond
        search = wolfe_line_search(
            evaluate, current.psi, direction, grad, f0=value, c1=config.c1, c2=config.c2, max_bisections=config.max_bisections
        )
        if search.step == 0.0:
            logger.warning("newton stalled at eps=%.3g, error %.3e", prob.epsilon, error)
            break
        current = search.aux
        value = search.value
        grad = search.gradient
        new_error = float(np.sum(np.abs(grad)))
        log.append(SweepRecord(iteration + 1, time.perf_counter() - started, new_error, value, current.h_iters))
        logger.debug(
            "newton it=%d err=%.3e V=%.12g step=%.3g cg=%d", iteration + 1, new_error, value, search.step, cg.iterations
        )
        if callback is not None:
            callback(iteration + 1, current)

    return NewtonResult(
        state=current.dual_state(), log=log, converged=converged, iterations=len(log), implied=current
    )

