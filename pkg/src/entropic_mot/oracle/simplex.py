"""Two-phase dense tableau simplex (Bland's rule) for martingale transport at desk scale."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from ..errors import InstanceError, ProblemSizeError
from ..model.measures import DiscreteMeasure, MotInstance

logger = logging.getLogger(__name__)

MAX_VARIABLES = 100_000
FEASIBILITY_TOL = 1e-9
_PIVOT_TOL = 1e-12
_REDUCED_COST_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class LpSolution:
    value: float
    coupling: np.ndarray
    status: str
    iterations: int = 0

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"


def _guard(n_x: int, n_y: int) -> None:
    if n_x * n_y > MAX_VARIABLES:
        raise ProblemSizeError(
            f"LP oracle refuses {n_x}x{n_y} = {n_x * n_y} variables (limit {MAX_VARIABLES})"
        )


def martingale_constraints(mu: DiscreteMeasure, nu: DiscreteMeasure) -> Tuple[np.ndarray, np.ndarray]:
    """Equality system A vec(P) = b: row sums, all but the last column sum, and barycenters."""
    if mu.dim != nu.dim:
        raise InstanceError(f"dimension mismatch: mu is {mu.dim}D, nu is {nu.dim}D")
    n_x, n_y, dim = mu.size, nu.size, mu.dim
    n_rows = n_x + (n_y - 1) + n_x * dim
    a = np.zeros((n_rows, n_x * n_y))
    b = np.zeros(n_rows)
    for i in range(n_x):
        a[i, i * n_y : (i + 1) * n_y] = 1.0
        b[i] = mu.weights[i]
    for j in range(n_y - 1):
        a[n_x + j, j::n_y] = 1.0
        b[n_x + j] = nu.weights[j]
    base = n_x + n_y - 1
    for i in range(n_x):
        disp = nu.points - mu.points[i]
        for k in range(dim):
            a[base + i * dim + k, i * n_y : (i + 1) * n_y] = disp[:, k]
    return a, b


def _pivot(tableau: np.ndarray, row: int, col: int) -> None:
    tableau[row] /= tableau[row, col]
    factors = tableau[:, col].copy()
    factors[row] = 0.0
    tableau -= np.outer(factors, tableau[row])


def _bland(tableau: np.ndarray, basis: List[int], n_cols: int, max_iters: int) -> Tuple[str, int]:
    """Minimize the objective row over the first ``n_cols`` columns; the last row holds reduced costs."""
    m = len(basis)
    for it in range(max_iters):
        reduced = tableau[-1, :n_cols]
        entering = np.flatnonzero(reduced < -_REDUCED_COST_TOL)
        if entering.size == 0:
            return "optimal", it
        col = int(entering[0])
        column = tableau[:m, col]
        eligible = np.flatnonzero(column > _PIVOT_TOL)
        if eligible.size == 0:
            return "unbounded", it
        ratios = tableau[eligible, -1] / column[eligible]
        best = ratios.min()
        tied = eligible[ratios <= best + 1e-15 * (1.0 + abs(best))]
        row = int(min(tied, key=lambda r: basis[r]))
        _pivot(tableau, row, col)
        basis[row] = col
    return "iteration_limit", max_iters


def _phase_one(a: np.ndarray, b: np.ndarray, max_iters: int, tol: float = FEASIBILITY_TOL) -> Tuple[str, np.ndarray, List[int], int]:
    m, n = a.shape
    tableau = np.zeros((m + 1, n + m + 1))
    tableau[:m, :n] = a
    tableau[:m, n : n + m] = np.eye(m)
    tableau[:m, -1] = b
    tableau[-1, :n] = -a.sum(axis=0)
    tableau[-1, -1] = -b.sum()
    basis = list(range(n, n + m))
    status, iters = _bland(tableau, basis, n + m, max_iters)
    if status != "optimal":
        return status, tableau, basis, iters
    if -tableau[-1, -1] > tol:
        return "infeasible", tableau, basis, iters

    redundant = []
    for row in range(m):
        if basis[row] < n:
            continue
        candidates = np.flatnonzero(np.abs(tableau[row, :n]) > FEASIBILITY_TOL)
        if candidates.size:
            _pivot(tableau, row, int(candidates[0]))
            basis[row] = int(candidates[0])
        else:
            redundant.append(row)
    if redundant:
        logger.debug("dropping %d redundant constraint rows", len(redundant))
        tableau = np.delete(tableau, redundant, axis=0)
        basis = [v for r, v in enumerate(basis) if r not in set(redundant)]
    return "feasible", tableau, basis, iters


def solve_mot_lp(inst: MotInstance, max_iters: Optional[int] = None) -> LpSolution:
    """Maximize P[c] over martingale couplings of (mu, nu)."""
    mu, nu = inst.mu, inst.nu
    _guard(mu.size, nu.size)
    a, b = martingale_constraints(mu, nu)
    m, n = a.shape
    max_iters = max_iters or 50 * (m + n)
    status, tableau, basis, iters = _phase_one(a, b, max_iters)
    empty = np.zeros((mu.size, nu.size))
    if status != "feasible":
        logger.info("LP phase one ended with status %s", status)
        return LpSolution(np.nan, empty, "infeasible" if status == "infeasible" else "iteration_limit", iters)

    cost = inst.cost_matrix().reshape(-1)
    phase_two = np.concatenate([tableau[:, :n], tableau[:, -1:]], axis=1)
    phase_two[-1] = 0.0
    phase_two[-1, :n] = -cost
    for row, var in enumerate(basis):
        phase_two[-1] -= phase_two[-1, var] * phase_two[row]
    status, more = _bland(phase_two, basis, n, max_iters)
    iters += more
    if status != "optimal":
        return LpSolution(np.nan, empty, "iteration_limit", iters)

    flat = np.zeros(n)
    flat[basis] = phase_two[: len(basis), -1]
    coupling = np.maximum(flat, 0.0).reshape(mu.size, nu.size)
    return LpSolution(float(np.sum(coupling * inst.cost_matrix())), coupling, "optimal", iters)


def feasible_martingale(mu: DiscreteMeasure, nu: DiscreteMeasure, tol: float = FEASIBILITY_TOL) -> bool:
    """Phase-one feasibility of the martingale transport polytope; ``tol`` bounds the residual mass."""
    _guard(mu.size, nu.size)
    a, b = martingale_constraints(mu, nu)
    status, *_ = _phase_one(a, b, 50 * sum(a.shape), tol)
    return status == "feasible"
