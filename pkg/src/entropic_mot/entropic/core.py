from __future__ import annotations

import copy
import logging
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import logsumexp

from ..common import EntropicConfig
from ..errors import InfeasibleMartingaleError, InstanceError, IterationLimitError, UnsupportedDimensionError
from ..model.measures import DiscreteMeasure, DualState, MotInstance

logger = logging.getLogger(__name__)

_MAX_HALVINGS = 60
_LSE_SLACK = 1e-14
_INTERIOR_TOL = 1e-12
_ANGLE_TOL = 1e-9
_TIE_TOL = 1e-12


def segment_sum(values: np.ndarray, indptr: np.ndarray) -> np.ndarray:
    return np.add.reduceat(values, indptr[:-1], axis=0)


def segment_max(values: np.ndarray, indptr: np.ndarray) -> np.ndarray:
    return np.maximum.reduceat(values, indptr[:-1], axis=0)


def segment_min(values: np.ndarray, indptr: np.ndarray) -> np.ndarray:
    return np.minimum.reduceat(values, indptr[:-1], axis=0)


def segment_lse(values: np.ndarray, indptr: np.ndarray) -> np.ndarray:
    """Log-sum-exp over consecutive nonempty segments, shifted by each segment's max."""
    top = segment_max(values, indptr)
    shifted = np.exp(values - np.repeat(top, np.diff(indptr)))
    return top + np.log(segment_sum(shifted, indptr))


def _gather_rows(indptr: np.ndarray, rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    counts = indptr[rows + 1] - indptr[rows]
    sub_ptr = np.concatenate(([0], np.cumsum(counts)))
    entries = np.repeat(indptr[rows] - sub_ptr[:-1], counts) + np.arange(sub_ptr[-1])
    return entries, sub_ptr


@dataclass(frozen=True, eq=False)
class ActiveSets:
    """Per-x sorted y-indices stored as a CSR pattern."""

    indptr: np.ndarray
    indices: np.ndarray
    n_y: int

    def __post_init__(self) -> None:
        counts = np.diff(self.indptr)
        if np.any(counts <= 0):
            raise InstanceError(f"empty active set for x index {int(np.flatnonzero(counts <= 0)[0])}")
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= self.n_y):
            raise InstanceError(f"active y index out of range [0, {self.n_y})")
        covered = np.bincount(self.indices, minlength=self.n_y) > 0
        if not covered.all():
            raise InstanceError(f"y index {int(np.flatnonzero(~covered)[0])} is not active for any x")

    @classmethod
    def full(cls, n_x: int, n_y: int) -> "ActiveSets":
        return cls(indptr=np.arange(n_x + 1) * n_y, indices=np.tile(np.arange(n_y), n_x), n_y=n_y)

    @classmethod
    def from_mask(cls, mask: np.ndarray) -> "ActiveSets":
        rows, cols = np.nonzero(mask)
        counts = np.bincount(rows, minlength=mask.shape[0])
        return cls(indptr=np.concatenate(([0], np.cumsum(counts))), indices=cols, n_y=mask.shape[1])

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[int]], n_y: int) -> "ActiveSets":
        cleaned = [np.unique(np.asarray(r, dtype=int)) for r in rows]
        counts = [r.size for r in cleaned]
        indices = np.concatenate(cleaned) if cleaned else np.zeros(0, dtype=int)
        return cls(indptr=np.concatenate(([0], np.cumsum(counts))), indices=indices, n_y=n_y)

    @property
    def n_x(self) -> int:
        return int(self.indptr.size - 1)

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    def counts(self) -> np.ndarray:
        return np.diff(self.indptr)

    def row(self, xi: int) -> np.ndarray:
        return self.indices[self.indptr[xi] : self.indptr[xi + 1]]

    def row_ids(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_x), self.counts())

    def to_mask(self) -> np.ndarray:
        mask = np.zeros((self.n_x, self.n_y), dtype=bool)
        mask[self.row_ids(), self.indices] = True
        return mask


@dataclass(frozen=True, eq=False)
class Penalization:
    """Quadratic penalty (alpha/2) * sum a_y (psi_y - anchor_y)^2 on the y-potential."""

    alpha: float
    a_weights: np.ndarray
    anchor: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if self.alpha < 0:
            raise InstanceError("penalization alpha must be nonnegative")
        if not np.all(self.a_weights > 0):
            raise InstanceError("penalization weights must be positive")

    def shift(self, psi: np.ndarray) -> np.ndarray:
        return psi if self.anchor is None else psi - self.anchor

    def value(self, psi: np.ndarray) -> float:
        gap = self.shift(psi)
        return 0.5 * self.alpha * float(np.sum(self.a_weights * gap * gap))

    def gradient(self, psi: np.ndarray) -> np.ndarray:
        return self.alpha * self.a_weights * self.shift(psi)


class EntropicProblem:
    """An instance at fixed epsilon restricted to its active sets, with per-entry caches."""

    def __init__(
        self,
        inst: MotInstance,
        epsilon: float,
        active: Optional[ActiveSets] = None,
        penalization: Optional[Penalization] = None,
        config: Optional[EntropicConfig] = None,
    ) -> None:
        if not epsilon > 0:
            raise InstanceError(f"epsilon must be positive, got {epsilon}")
        mu, nu = inst.mu, inst.nu
        active = active if active is not None else ActiveSets.full(mu.size, nu.size)
        if active.n_x != mu.size or active.n_y != nu.size:
            raise InstanceError(f"active sets shaped {active.n_x}x{active.n_y} for a {mu.size}x{nu.size} instance")
        if penalization is not None and penalization.a_weights.shape != (nu.size,):
            raise InstanceError("penalization weights must have one entry per y point")
        self.inst = inst
        self.epsilon = float(epsilon)
        self.active = active
        self.penalization = penalization
        self.config = config or EntropicConfig()

        self.rows = active.row_ids()
        self.cols = active.indices
        self.disp = nu.points[self.cols] - mu.points[self.rows]
        self.cost = inst.cost.evaluate_pairs(mu.points[self.rows], nu.points[self.cols], self.rows, self.cols)
        with np.errstate(divide="ignore"):
            self.log_mu = np.log(mu.weights)
            self.log_nu = np.log(nu.weights)
        self.col_order = np.argsort(self.cols, kind="stable")
        self.col_indptr = np.concatenate(([0], np.cumsum(np.bincount(self.cols, minlength=nu.size))))
        self.x_scale = 1.0 + np.linalg.norm(mu.points, axis=1)
        self._infeasible: Optional[np.ndarray] = None

    @property
    def n_x(self) -> int:
        return self.inst.mu.size

    @property
    def n_y(self) -> int:
        return self.inst.nu.size

    @property
    def dim(self) -> int:
        return self.inst.dim

    @property
    def nnz(self) -> int:
        return self.active.nnz

    def with_epsilon(self, epsilon: float) -> "EntropicProblem":
        if not epsilon > 0:
            raise InstanceError(f"epsilon must be positive, got {epsilon}")
        clone = copy.copy(self)
        clone.epsilon = float(epsilon)
        return clone

    def with_penalization(self, penalization: Optional[Penalization]) -> "EntropicProblem":
        if penalization is not None and penalization.a_weights.shape != (self.n_y,):
            raise InstanceError("penalization weights must have one entry per y point")
        clone = copy.copy(self)
        clone.penalization = penalization
        return clone

    def infeasible_rows(self) -> np.ndarray:
        """x indices not in the relative interior of the hull of their active y points."""
        if self._infeasible is None:
            if self.dim > 2:
                logger.debug("interior check skipped in dimension %d", self.dim)
                self._infeasible = np.zeros(0, dtype=int)
            else:
                self._infeasible = interior_violations(self.inst.mu.points, self.inst.nu.points, self.active)
        return self._infeasible


class HUpdate(NamedTuple):
    h_x: np.ndarray
    phi_x: float
    iterations: int


class HBlock(NamedTuple):
    h: np.ndarray
    phi: np.ndarray
    iterations: np.ndarray


@dataclass(frozen=True, eq=False)
class KernelStats:
    primal_value: float
    entropy: float
    dual_value: float
    x_marginal: np.ndarray
    y_marginal: np.ndarray
    martingale_residual: np.ndarray
    mass: float

    def y_error(self, nu_weights: np.ndarray) -> float:
        return float(np.sum(np.abs(nu_weights - self.y_marginal)))

    def x_error(self, mu_weights: np.ndarray) -> float:
        return float(np.sum(np.abs(mu_weights - self.x_marginal)))

    def martingale_error(self) -> float:
        return float(np.sum(np.linalg.norm(self.martingale_residual, axis=1)))


def delta(prob: EntropicProblem, state: DualState, xi: int, yi: int) -> float:
    """phi(x) + psi(y) + h(x).(y - x) - c(x, y) for one pair."""
    x = prob.inst.mu.points[xi]
    y = prob.inst.nu.points[yi]
    cost = prob.inst.cost.evaluate_pairs(x[None, :], y[None, :], np.array([xi]), np.array([yi]))[0]
    return float(state.phi[xi] + state.psi[yi] + state.h[xi] @ (y - x) - cost)


def delta_entries(prob: EntropicProblem, state: DualState) -> np.ndarray:
    hd = np.einsum("kd,kd->k", state.h[prob.rows], prob.disp)
    return state.phi[prob.rows] + state.psi[prob.cols] + hd - prob.cost


def stabilized_log_mean(terms: Sequence[float] | np.ndarray, log_weight_offset: float = 0.0) -> float:
    """max(t) + log sum exp(t - max(t)) + offset."""
    values = np.asarray(terms, dtype=float).reshape(-1)
    if values.size == 0:
        raise ValueError("stabilized_log_mean needs at least one term")
    if not np.all(np.isfinite(values)):
        raise ValueError("stabilized_log_mean terms must be finite")
    return float(logsumexp(values)) + float(log_weight_offset)


def update_phi(prob: EntropicProblem, state: DualState) -> np.ndarray:
    hd = np.einsum("kd,kd->k", state.h[prob.rows], prob.disp)
    exponents = -(state.psi[prob.cols] + hd - prob.cost) / prob.epsilon
    return prob.epsilon * (segment_lse(exponents, prob.active.indptr) - prob.log_mu)


def update_psi(prob: EntropicProblem, state: DualState) -> np.ndarray:
    hd = np.einsum("kd,kd->k", state.h[prob.rows], prob.disp)
    exponents = -(state.phi[prob.rows] + hd - prob.cost) / prob.epsilon
    return prob.epsilon * (segment_lse(exponents[prob.col_order], prob.col_indptr) - prob.log_nu)


def _solve_h(prob: EntropicProblem, psi: np.ndarray, rows_sel: np.ndarray, h0: np.ndarray) -> HBlock:
    """Damped Newton on each selected row's log-partition in h; returns h, implied phi and steps."""
    bad = np.intersect1d(prob.infeasible_rows(), rows_sel)
    if bad.size:
        raise InfeasibleMartingaleError(bad)

    cfg = prob.config
    eps = prob.epsilon
    entries, sub_ptr = _gather_rows(prob.active.indptr, rows_sel)
    base = -(psi[prob.cols[entries]] - prob.cost[entries]) / eps
    disp = prob.disp[entries]
    tol = cfg.h_tol * prob.x_scale[rows_sel]

    h = np.array(h0, dtype=float, copy=True)
    iterations = np.zeros(rows_sel.size, dtype=int)
    pending = np.arange(rows_sel.size)

    def exponents(rows_local: np.ndarray, h_rows: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        ent, ptr = _gather_rows(sub_ptr, rows_local)
        owner = np.repeat(np.arange(rows_local.size), np.diff(ptr))
        s = base[ent] - np.einsum("kd,kd->k", h_rows[owner], disp[ent]) / eps
        return s, ent, ptr

    for it in range(cfg.max_h_iters + 1):
        s, ent, ptr = exponents(pending, h[pending])
        owner = np.repeat(np.arange(pending.size), np.diff(ptr))
        lse = segment_lse(s, ptr)
        w = np.exp(s - lse[owner])
        d = disp[ent]
        mean = segment_sum(w[:, None] * d, ptr)
        open_rows = np.linalg.norm(mean, axis=1) > tol[pending]
        if not open_rows.any():
            break
        if it == cfg.max_h_iters:
            stuck = rows_sel[pending[open_rows]]
            raise IterationLimitError(
                f"h-Newton did not converge in {cfg.max_h_iters} iterations for x index {stuck[:10].tolist()}"
            )
        cov = segment_sum(w[:, None, None] * d[:, :, None] * d[:, None, :], ptr)
        cov -= mean[:, :, None] * mean[:, None, :]
        spread = segment_max(s, ptr) - segment_min(s, ptr)
        pending, lse, mean, cov, spread = (
            pending[open_rows],
            lse[open_rows],
            mean[open_rows],
            cov[open_rows],
            spread[open_rows],
        )
        step = eps * np.einsum("kij,kj->ki", np.linalg.pinv(cov, hermitian=True), mean)
        flat = ~(np.linalg.norm(step, axis=1) > 0)
        if flat.any():
            # collapsed row weights: move along the mean displacement instead
            sq = np.einsum("kd,kd->k", mean[flat], mean[flat])
            step[flat] = eps * (spread[flat] + 1.0)[:, None] * mean[flat] / sq[:, None]

        scale = np.ones(pending.size)
        todo = np.arange(pending.size)
        for _ in range(_MAX_HALVINGS):
            trial = h[pending[todo]] + scale[todo, None] * step[todo]
            s_trial, _, ptr_trial = exponents(pending[todo], trial)
            new = segment_lse(s_trial, ptr_trial)
            ok = new <= lse[todo] + _LSE_SLACK * (1.0 + np.abs(lse[todo]))
            h[pending[todo[ok]]] = trial[ok]
            todo = todo[~ok]
            if not todo.size:
                break
            scale[todo] *= 0.5
        if todo.size:
            logger.debug("h-Newton line search exhausted on %d rows", todo.size)
        iterations[pending] += 1

    s, _, ptr = exponents(np.arange(rows_sel.size), h)
    phi = eps * (segment_lse(s, ptr) - prob.log_mu[rows_sel])
    return HBlock(h=h, phi=phi, iterations=iterations)


def update_h(
    prob: EntropicProblem, state: DualState, xi: int, warm_start: Optional[np.ndarray] = None
) -> HUpdate:
    """Joint (phi, h) block for a single x: h solves the martingale condition, phi is implied."""
    h0 = state.h[xi] if warm_start is None else np.asarray(warm_start, dtype=float)
    block = _solve_h(prob, state.psi, np.array([xi]), h0.reshape(1, -1))
    return HUpdate(h_x=block.h[0], phi_x=float(block.phi[0]), iterations=int(block.iterations[0]))


def update_h_all(prob: EntropicProblem, state: DualState, warm_h: Optional[np.ndarray] = None) -> HBlock:
    """Joint (phi, h) block over every x, warm-started from ``warm_h`` or ``state.h``."""
    h0 = state.h if warm_h is None else warm_h
    return _solve_h(prob, state.psi, np.arange(prob.n_x), h0)


def kernel_stats(prob: EntropicProblem, state: DualState) -> KernelStats:
    log_p = -delta_entries(prob, state) / prob.epsilon
    p = np.exp(log_p)
    mu, nu = prob.inst.mu, prob.inst.nu
    mass = float(np.sum(p))
    return KernelStats(
        primal_value=float(np.sum(p * prob.cost)),
        entropy=float(np.sum((log_p - 1.0) * p)),
        dual_value=float(mu.weights @ state.phi + nu.weights @ state.psi + prob.epsilon * mass),
        x_marginal=segment_sum(p, prob.active.indptr),
        y_marginal=np.bincount(prob.cols, weights=p, minlength=prob.n_y),
        martingale_residual=segment_sum(p[:, None] * prob.disp, prob.active.indptr),
        mass=mass,
    )


def kernel_entries(prob: EntropicProblem, state: DualState) -> np.ndarray:
    return np.exp(-delta_entries(prob, state) / prob.epsilon)


def interior_violations(
    mu_points: np.ndarray, nu_points: np.ndarray, active: ActiveSets, tol: float = _INTERIOR_TOL
) -> np.ndarray:
    """x indices whose active y points do not surround them (1D and 2D only)."""
    dim = mu_points.shape[1]
    rows = active.row_ids()
    disp = nu_points[active.indices] - mu_points[rows]
    tiny = tol * (1.0 + np.linalg.norm(mu_points, axis=1))
    if dim == 1:
        lo = segment_min(disp[:, 0], active.indptr)
        hi = segment_max(disp[:, 0], active.indptr)
        surrounded = (lo < -tiny) & (hi > tiny)
        degenerate = (np.abs(lo) <= tiny) & (np.abs(hi) <= tiny)
        return np.flatnonzero(~(surrounded | degenerate))
    if dim != 2:
        raise UnsupportedDimensionError(dim, "interior check")

    moving = np.hypot(disp[:, 0], disp[:, 1]) > tiny[rows]
    owner = rows[moving]
    theta = np.arctan2(disp[moving, 1], disp[moving, 0])
    counts = np.bincount(owner, minlength=active.n_x)
    ok = counts == 0
    present = np.flatnonzero(counts > 0)
    if present.size:
        order = np.lexsort((theta, owner))
        theta = theta[order]
        ptr = np.concatenate(([0], np.cumsum(counts[present])))
        first = theta[ptr[:-1]]
        last = theta[ptr[1:] - 1]
        gaps = np.empty_like(theta)
        gaps[:-1] = np.diff(theta)
        gaps[ptr[1:] - 1] = first + 2.0 * np.pi - last
        widest = segment_max(gaps, ptr)
        sin_dev = np.abs(np.sin(theta - np.repeat(first, np.diff(ptr))))
        collinear = segment_max(sin_dev, ptr) <= _ANGLE_TOL
        ok[present] = (widest < np.pi - _ANGLE_TOL) | (collinear & (widest <= np.pi + _ANGLE_TOL))
    return np.flatnonzero(~ok)


def _checked_interior(prob: EntropicProblem, active: ActiveSets) -> np.ndarray:
    if prob.dim > 2:
        return np.zeros(0, dtype=int)
    return interior_violations(prob.inst.mu.points, prob.inst.nu.points, active)


def _pattern(prob: EntropicProblem, keep: np.ndarray) -> ActiveSets:
    counts = segment_sum(keep.astype(int), prob.active.indptr)
    return ActiveSets(indptr=np.concatenate(([0], np.cumsum(counts))), indices=prob.cols[keep], n_y=prob.n_y)


def _repair_pattern(
    prob: EntropicProblem, keep: np.ndarray, p: np.ndarray, fallback: np.ndarray
) -> ActiveSets:
    """Restore row coverage, column coverage and the interior condition on a kept-entry mask."""
    indptr = prob.active.indptr
    row_first = np.lexsort((-p, prob.rows))[indptr[:-1]]
    empty_rows = segment_sum(keep.astype(int), indptr) == 0
    keep[row_first[empty_rows]] = True

    col_best = np.lexsort((-p, prob.cols))[prob.col_indptr[:-1]]
    uncovered = np.bincount(prob.cols[keep], minlength=prob.n_y) == 0
    keep[col_best[uncovered]] = True

    candidate = _pattern(prob, keep)
    bad = _checked_interior(prob, candidate)
    if bad.size:
        keep |= np.isin(prob.rows, bad) & fallback
        candidate = _pattern(prob, keep)
    return candidate


def truncate_kernel(prob: EntropicProblem, state: DualState, threshold_factor: float) -> ActiveSets:
    """Drop entries with p < threshold_factor * ref(mu_x, nu_y) without emptying rows or columns."""
    if threshold_factor <= 0:
        return prob.active
    p = kernel_entries(prob, state)
    mu_w = prob.inst.mu.weights[prob.rows]
    nu_w = prob.inst.nu.weights[prob.cols]
    rule = prob.config.truncation_rule
    reference = np.minimum(mu_w, nu_w) if rule == "min" else (mu_w if rule == "mu" else nu_w)
    keep = p >= threshold_factor * reference
    active = _repair_pattern(prob, keep.copy(), p, fallback=np.ones_like(keep))
    kept = active.to_mask()[prob.rows, prob.cols]
    dropped = float(np.sum(p[~kept]))
    if dropped > prob.config.truncation_mass_warning:
        logger.warning("truncation dropped %.3e kernel mass (eps=%.3g)", dropped, prob.epsilon)
    logger.info(
        "truncated kernel from %d to %d entries (%.1f per x, dropped mass %.2e)",
        prob.nnz,
        active.nnz,
        active.nnz / active.n_x,
        dropped,
    )
    return active


def nearest_indices(old_points: np.ndarray, new_points: np.ndarray) -> np.ndarray:
    """Index of the nearest old point for each new point; ties go to the lowest (lexicographically smallest) index."""
    old_points = np.asarray(old_points, dtype=float)
    new_points = np.asarray(new_points, dtype=float)
    tree = cKDTree(old_points)
    dist, nearest = tree.query(new_points)
    if old_points.shape[0] == 1:
        return np.zeros(new_points.shape[0], dtype=int)
    radius = dist * (1.0 + _TIE_TOL) + _TIE_TOL
    out = np.asarray(nearest, dtype=int).copy()
    for k, candidates in enumerate(tree.query_ball_point(new_points, radius)):
        if len(candidates) > 1:
            out[k] = min(candidates)
    return out


def prolong_active(
    active: ActiveSets,
    old_mu: DiscreteMeasure,
    old_nu: DiscreteMeasure,
    new_mu: DiscreteMeasure,
    new_nu: DiscreteMeasure,
) -> ActiveSets:
    """Carry a sparsity pattern to refined grids: (x', y') is active when its nearest old pair was."""
    x_map = nearest_indices(old_mu.points, new_mu.points)
    y_map = nearest_indices(old_nu.points, new_nu.points)
    mask = active.to_mask()[x_map][:, y_map]
    empty = ~mask.any(axis=1)
    mask[empty] = True
    uncovered = np.flatnonzero(~mask.any(axis=0))
    if uncovered.size:
        mask[nearest_indices(new_mu.points, new_nu.points[uncovered]), uncovered] = True
    candidate = ActiveSets.from_mask(mask)
    if new_mu.dim <= 2:
        bad = interior_violations(new_mu.points, new_nu.points, candidate)
        if bad.size:
            mask[bad] = True
            candidate = ActiveSets.from_mask(mask)
    return candidate
