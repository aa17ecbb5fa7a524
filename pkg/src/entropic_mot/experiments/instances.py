from __future__ import annotations

import logging
from typing import Callable, Dict, Optional, Tuple

import numpy as np
from scipy import optimize, special, stats

from ..errors import InstanceError
from ..model.measures import CostSpec, DiscreteMeasure, MotInstance, check_convex_order_1d
from ..solvers.hybrid import GridFamily

logger = logging.getLogger(__name__)

SIGMA_MU = 0.1
SIGMA_NU = 0.2
LOG_SPAN = 6.0
POWER = 1.5
RANDOM_COSTS = ("forward_start_power", "distance", "oscillatory", "tabulated")


def _midpoints(lo: float, hi: float, n: int) -> np.ndarray:
    step = (hi - lo) / n
    return lo + step * (np.arange(n) + 0.5)


def _measure(points: np.ndarray, weights: np.ndarray) -> DiscreteMeasure:
    keep = weights > 0
    if not np.any(keep):
        raise InstanceError("tabulated density vanishes on the whole grid")
    return DiscreteMeasure.from_arrays(points[keep], weights[keep] / weights[keep].sum())


def _normalized(weights: np.ndarray) -> np.ndarray:
    return weights / weights.sum()


def tilt_to_mean(points: np.ndarray, weights: np.ndarray, target: float) -> np.ndarray:
    """Exponential tilt w * exp(theta * y) of 1D weights whose mean is ``target``."""
    points = np.asarray(points, dtype=float).reshape(-1)
    if not points.min() < target < points.max():
        raise InstanceError(f"mean {target:.6g} is outside ({points.min():.6g}, {points.max():.6g})")
    log_w = np.log(weights)
    scale = float(np.ptp(points))

    def mean_gap(theta: float) -> float:
        return float(special.softmax(log_w + theta * points) @ points) - target

    lo, hi = -1.0 / scale, 1.0 / scale
    while mean_gap(lo) > 0:
        lo *= 2.0
    while mean_gap(hi) < 0:
        hi *= 2.0
    theta = optimize.brentq(mean_gap, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps)
    return special.softmax(log_w + theta * points)


def _power_weights(points: np.ndarray) -> np.ndarray:
    return np.sum(np.abs(points) ** POWER, axis=1)


def _lognormal_density(grid: np.ndarray, sigma: float) -> np.ndarray:
    """Law of exp(N(-sigma^2/2, sigma^2)) - 1 on ``grid``."""
    law = stats.lognorm(s=sigma, scale=np.exp(-0.5 * sigma**2))
    return law.pdf(grid + 1.0)


def _lognormal_range(sigma: float) -> Tuple[float, float]:
    centre = -0.5 * sigma**2
    return float(np.exp(centre - LOG_SPAN * sigma) - 1.0), float(np.exp(centre + LOG_SPAN * sigma) - 1.0)


def power_family(n: int, dim: int, cost: str) -> MotInstance:
    """mu uniform on [-1, 1]^d and nu proportional to sum_i |y_i|^1.5 times mu."""
    axis_x = _midpoints(-1.0, 1.0, n)
    axis_y = np.linspace(-1.0, 1.0, n)
    x = np.array(np.meshgrid(*[axis_x] * dim, indexing="ij")).reshape(dim, -1).T
    y = np.array(np.meshgrid(*[axis_y] * dim, indexing="ij")).reshape(dim, -1).T
    mu = _measure(x, np.ones(len(x)))
    nu = _measure(y, _power_weights(y))
    return MotInstance(mu=mu, nu=nu, cost=CostSpec(cost))


def mixture_family(n: int, cost: str) -> MotInstance:
    """Average of the uniform / power legs and the two lognormal legs on one grid."""
    lo = -1.0
    hi = max(1.0, _lognormal_range(SIGMA_NU)[1])
    axis_x = _midpoints(lo, hi, n)
    axis_y = np.linspace(lo, hi, n)
    uniform = _normalized(np.where(np.abs(axis_x) <= 1.0, 1.0, 0.0))
    power = _normalized(np.where(np.abs(axis_y) <= 1.0, np.abs(axis_y) ** POWER, 0.0))
    mu_weights = 0.5 * (uniform + _normalized(_lognormal_density(axis_x, SIGMA_MU)))
    nu_weights = 0.5 * (power + _normalized(_lognormal_density(axis_y, SIGMA_NU)))
    mu = _measure(axis_x, mu_weights)
    nu = _measure(axis_y, nu_weights)
    nu = DiscreteMeasure.from_arrays(nu.points, tilt_to_mean(nu.points, nu.weights, float(mu.mean()[0])))
    return MotInstance(mu=mu, nu=nu, cost=CostSpec(cost))


def random_ordered_instance(
    rng: np.random.Generator, n_x: int, n_y: int, cost_kind: str = "forward_start_power"
) -> MotInstance:
    """1D instance in convex order by construction: nu is the law of a random martingale kernel applied to mu."""
    if n_x < 1 or n_y < 3:
        raise InstanceError(f"random instances need n_x >= 1 and n_y >= 3, got {n_x}x{n_y}")
    if cost_kind not in RANDOM_COSTS:
        raise InstanceError(f"unknown cost '{cost_kind}' for random instances")
    x = np.sort(rng.uniform(-1.0, 1.0, n_x))
    y = np.concatenate(([-1.5], np.sort(rng.uniform(-1.5, 1.5, n_y - 2)), [1.5]))
    mu_weights = rng.dirichlet(np.ones(n_x))
    nu_weights = np.zeros(n_y)
    for xi, weight in zip(x, mu_weights):
        nu_weights += weight * tilt_to_mean(y, rng.uniform(0.2, 1.0, n_y), xi)
    matrix = rng.uniform(-1.0, 1.0, (n_x, n_y)) if cost_kind == "tabulated" else None
    mu = DiscreteMeasure.from_arrays(x, mu_weights)
    nu = DiscreteMeasure.from_arrays(y, nu_weights / nu_weights.sum())
    return MotInstance(mu=mu, nu=nu, cost=CostSpec(cost_kind, matrix))


_FAMILIES: Dict[str, Tuple[int, Callable[[int], MotInstance]]] = {
    "left_curtain": (1, lambda n: power_family(n, 1, "forward_start_power")),
    "distance": (1, lambda n: power_family(n, 1, "distance")),
    "oscillatory": (1, lambda n: power_family(n, 1, "oscillatory")),
    "basket2d": (2, lambda n: power_family(n, 2, "basket2d")),
    "mixture_forward_start_power": (1, lambda n: mixture_family(n, "forward_start_power")),
    "mixture_distance": (1, lambda n: mixture_family(n, "distance")),
    "mixture_oscillatory": (1, lambda n: mixture_family(n, "oscillatory")),
}
INSTANCE_NAMES = tuple(_FAMILIES) + ("random",)


def generate_instance(name: str, n: int, seed: Optional[int] = None) -> MotInstance:
    """Named experiment tabulated with ``n`` points per axis."""
    if n < 2:
        raise InstanceError(f"grid size must be at least 2, got {n}")
    if name == "random":
        return random_ordered_instance(np.random.default_rng(seed), n, n + 2)
    if name not in _FAMILIES:
        raise InstanceError(f"unknown instance '{name}', expected one of {', '.join(INSTANCE_NAMES)}")
    inst = _FAMILIES[name][1](n)
    if inst.dim == 1:
        order = check_convex_order_1d(inst.mu, inst.nu)
        if not order.ordered:
            logger.warning(
                "%s at n=%d is not in convex order (call gap %.3e at %.6g)",
                name,
                n,
                order.worst_violation,
                order.worst_strike,
            )
    return inst


def instance_family(name: str) -> GridFamily:
    if name not in _FAMILIES:
        raise InstanceError(f"'{name}' is not a grid family, expected one of {', '.join(_FAMILIES)}")
    dim, build = _FAMILIES[name]
    return GridFamily(name=name, dim=dim, build=build)
