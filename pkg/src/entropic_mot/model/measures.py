from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from ..errors import InstanceError, UnsupportedDimensionError

COST_KINDS: Tuple[str, ...] = ("forward_start_power", "distance", "oscillatory", "basket2d", "tabulated")
_COST_DIMS = {"forward_start_power": 1, "oscillatory": 1, "basket2d": 2}

WEIGHT_SUM_TOL = 1e-12
CONVEX_ORDER_TOL = 1e-10


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    """Finitely supported measure; points are kept in lexicographic order."""

    points: np.ndarray
    weights: np.ndarray

    @classmethod
    def from_arrays(cls, points: Sequence | np.ndarray, weights: Sequence | np.ndarray) -> "DiscreteMeasure":
        pts = np.array(points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        w = np.array(weights, dtype=float).reshape(-1)
        if pts.ndim != 2 or pts.shape[0] != w.shape[0]:
            raise InstanceError(f"points of shape {pts.shape} do not match {w.shape[0]} weights")
        order = np.lexsort(pts.T[::-1])
        return cls(points=_frozen(pts[order].copy()), weights=_frozen(w[order].copy()))

    @property
    def dim(self) -> int:
        return int(self.points.shape[1])

    @property
    def size(self) -> int:
        return int(self.points.shape[0])

    def mean(self) -> np.ndarray:
        return self.weights @ self.points


@dataclass(frozen=True, eq=False)
class CostSpec:
    kind: str
    matrix: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if self.kind not in COST_KINDS:
            raise InstanceError(f"unknown cost kind '{self.kind}'")
        if self.kind == "tabulated":
            if self.matrix is None:
                raise InstanceError("tabulated cost requires a matrix")
            object.__setattr__(self, "matrix", _frozen(np.array(self.matrix, dtype=float)))

    @property
    def required_dim(self) -> Optional[int]:
        return _COST_DIMS.get(self.kind)

    def evaluate_pairs(
        self,
        x_points: np.ndarray,
        y_points: np.ndarray,
        x_index: Optional[np.ndarray] = None,
        y_index: Optional[np.ndarray] = None,
    ) -> np.ndarray:
        """Cost of paired rows ``(x_points[k], y_points[k])``; tabulated costs use the indices."""
        if self.kind == "tabulated":
            if x_index is None or y_index is None:
                raise InstanceError("tabulated cost is evaluated by support index")
            return self.matrix[x_index, y_index]
        x = np.asarray(x_points, dtype=float)
        y = np.asarray(y_points, dtype=float)
        if self.kind == "forward_start_power":
            return x[:, 0] * y[:, 0] ** 2
        if self.kind == "distance":
            return np.linalg.norm(x - y, axis=1)
        if self.kind == "oscillatory":
            return np.sin(8.0 * x[:, 0] * y[:, 0])
        # basket2d
        y_sq = y**2
        return x[:, 0] * (y_sq[:, 0] + 2.0 * y_sq[:, 1]) + x[:, 1] * (2.0 * y_sq[:, 0] + y_sq[:, 1])


@dataclass(frozen=True, eq=False)
class DualState:
    phi: np.ndarray
    psi: np.ndarray
    h: np.ndarray

    @classmethod
    def zeros(cls, n_x: int, n_y: int, dim: int) -> "DualState":
        return cls(phi=np.zeros(n_x), psi=np.zeros(n_y), h=np.zeros((n_x, dim)))

    def replace(self, **changes: np.ndarray) -> "DualState":
        fields = {"phi": self.phi, "psi": self.psi, "h": self.h}
        fields.update(changes)
        return DualState(**fields)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.phi)) and np.all(np.isfinite(self.psi)) and np.all(np.isfinite(self.h)))


@dataclass(frozen=True, eq=False)
class MotInstance:
    mu: DiscreteMeasure
    nu: DiscreteMeasure
    cost: CostSpec

    @property
    def dim(self) -> int:
        return self.mu.dim

    def cost_matrix(self) -> np.ndarray:
        """Dense |X| x |Y| cost; only meant for desk-scale problems."""
        n_x, n_y = self.mu.size, self.nu.size
        rows = np.repeat(np.arange(n_x), n_y)
        cols = np.tile(np.arange(n_y), n_x)
        values = self.cost.evaluate_pairs(self.mu.points[rows], self.nu.points[cols], rows, cols)
        return values.reshape(n_x, n_y)


@dataclass(frozen=True)
class Violation:
    invariant: str
    message: str
    index: Optional[int] = None


@dataclass(frozen=True)
class ConvexOrderReport:
    ordered: bool
    worst_violation: float
    worst_strike: float


def _measure_violations(name: str, measure: DiscreteMeasure) -> List[Violation]:
    found: List[Violation] = []
    for i in np.flatnonzero(~(measure.weights > 0.0)):
        found.append(Violation("positive_weight", f"{name}: nonpositive weight at index {int(i)}", int(i)))
    total = float(np.sum(measure.weights))
    if abs(total - 1.0) > WEIGHT_SUM_TOL:
        found.append(Violation("unit_mass", f"{name}: weights sum to {total!r}, expected 1"))
    for i in np.flatnonzero(~np.all(np.isfinite(measure.points), axis=1)):
        found.append(Violation("finite_points", f"{name}: non-finite point at index {int(i)}", int(i)))
    if measure.size > 1:
        duplicate = np.all(measure.points[1:] == measure.points[:-1], axis=1)
        for i in np.flatnonzero(duplicate):
            found.append(Violation("distinct_points", f"{name}: duplicated point at index {int(i) + 1}", int(i) + 1))
    return found


def validate_instance(inst: MotInstance) -> List[Violation]:
    """Collect every broken invariant of ``inst``; an empty list means the instance is valid."""
    violations = _measure_violations("mu", inst.mu) + _measure_violations("nu", inst.nu)
    if inst.mu.dim != inst.nu.dim:
        violations.append(Violation("same_dimension", f"dimension mismatch: mu is {inst.mu.dim}D, nu is {inst.nu.dim}D"))
        return violations
    required = inst.cost.required_dim
    if required is not None and required != inst.mu.dim:
        violations.append(
            Violation("cost_dimension", f"dimension mismatch: cost '{inst.cost.kind}' needs {required}D points")
        )
    if inst.cost.kind == "tabulated":
        expected = (inst.mu.size, inst.nu.size)
        if inst.cost.matrix.shape != expected:
            violations.append(
                Violation("cost_shape", f"tabulated cost has shape {inst.cost.matrix.shape}, expected {expected}")
            )
        elif not np.all(np.isfinite(inst.cost.matrix)):
            bad = int(np.flatnonzero(~np.isfinite(inst.cost.matrix).all(axis=1))[0])
            violations.append(Violation("finite_cost", f"non-finite cost entry in row {bad}", bad))
    elif not violations:
        if not np.all(np.isfinite(inst.cost_matrix())):
            violations.append(Violation("finite_cost", "cost is not finite on the support product"))
    return violations


def _call_prices(measure: DiscreteMeasure, strikes: np.ndarray) -> np.ndarray:
    payoff = np.maximum(measure.points[:, 0][None, :] - strikes[:, None], 0.0)
    return payoff @ measure.weights


def check_convex_order_1d(
    mu: DiscreteMeasure, nu: DiscreteMeasure, tol: float = CONVEX_ORDER_TOL
) -> ConvexOrderReport:
    """Convex order in 1D through call prices at every support strike and equal means."""
    if mu.dim != 1 or nu.dim != 1:
        raise UnsupportedDimensionError(max(mu.dim, nu.dim), "check_convex_order_1d")
    strikes = np.union1d(mu.points[:, 0], nu.points[:, 0])
    gaps = _call_prices(mu, strikes) - _call_prices(nu, strikes)
    worst = int(np.argmax(gaps))
    mean_mu = float(mu.mean()[0])
    mean_nu = float(nu.mean()[0])
    means_match = abs(mean_mu - mean_nu) <= tol * (1.0 + abs(mean_mu))
    ordered = bool(means_match and np.all(gaps <= tol))
    return ConvexOrderReport(ordered=ordered, worst_violation=float(gaps[worst]), worst_strike=float(strikes[worst]))


def eval_cost(cost: CostSpec, x, y) -> float:
    """Evaluate ``c(x, y)``; for a tabulated cost ``x`` and ``y`` are support indices."""
    if cost.kind == "tabulated":
        n_x, n_y = cost.matrix.shape
        xi, yi = int(x), int(y)
        if not (0 <= xi < n_x and 0 <= yi < n_y):
            raise IndexError(f"tabulated cost index ({xi}, {yi}) outside shape {cost.matrix.shape}")
        return float(cost.matrix[xi, yi])
    xp = np.atleast_1d(np.asarray(x, dtype=float))
    yp = np.atleast_1d(np.asarray(y, dtype=float))
    if xp.shape != yp.shape:
        raise UnsupportedDimensionError(max(xp.size, yp.size), f"cost '{cost.kind}' on mismatched points")
    required = cost.required_dim
    if required is not None and xp.size != required:
        raise UnsupportedDimensionError(xp.size, f"cost '{cost.kind}'")
    return float(cost.evaluate_pairs(xp[None, :], yp[None, :])[0])
