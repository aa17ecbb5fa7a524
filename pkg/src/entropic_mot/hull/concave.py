from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from ..common import HullConfig
from ..errors import HullLoopError, OutOfHullError

logger = logging.getLogger(__name__)

_NEAR_ZERO_WEIGHT = 1e-9


@dataclass(frozen=True, eq=False)
class HullResult:
    """Concave envelope of sampled f at x, with the affine certificate y -> value + gradient.(y - x)."""

    value: float
    support: np.ndarray
    barycentric_coefficients: np.ndarray
    gradient: np.ndarray
    near_boundary: bool = False


def _upper_chain(y: np.ndarray, f: np.ndarray) -> list[int]:
    """Upper hull of (y_i, f_i) for increasing y, keeping collinear points."""
    chain: list[int] = []
    for i in range(y.size):
        while len(chain) >= 2:
            o, a = chain[-2], chain[-1]
            cross = (y[a] - y[o]) * (f[i] - f[o]) - (f[a] - f[o]) * (y[i] - y[o])
            if cross > 0.0:
                chain.pop()
            else:
                break
        chain.append(i)
    return chain


def hull_1d(grid_y: np.ndarray, f: np.ndarray, x: float, config: Optional[HullConfig] = None) -> HullResult:
    config = config or HullConfig()
    y = np.asarray(grid_y, dtype=float).reshape(-1)
    values = np.asarray(f, dtype=float).reshape(-1)
    x = float(np.asarray(x, dtype=float).reshape(-1)[0])
    order = np.argsort(y, kind="stable")
    ys, fs = y[order], values[order]
    slack = config.boundary_slack * (1.0 + abs(x))
    if x < ys[0] - slack or x > ys[-1] + slack:
        raise OutOfHullError()
    x = min(max(x, ys[0]), ys[-1])

    chain = _upper_chain(ys, fs)
    vertices = ys[chain]
    k = int(np.searchsorted(vertices, x, side="left"))
    if k < len(chain) and vertices[k] == x:
        j = chain[k]
        if len(chain) == 1:
            slope = 0.0
        elif k + 1 < len(chain):
            nxt = chain[k + 1]
            slope = (fs[nxt] - fs[j]) / (ys[nxt] - ys[j])
        else:
            prev = chain[k - 1]
            slope = (fs[j] - fs[prev]) / (ys[j] - ys[prev])
        on_edge = j == 0 or j == ys.size - 1
        return HullResult(float(fs[j]), np.array([order[j]]), np.array([1.0]), np.array([slope]), near_boundary=on_edge)

    left, right = chain[k - 1], chain[k]
    width = ys[right] - ys[left]
    lam_left = (ys[right] - x) / width
    lam_right = (x - ys[left]) / width
    value = lam_left * fs[left] + lam_right * fs[right]
    slope = (fs[right] - fs[left]) / width
    return HullResult(
        float(value),
        np.array([order[left], order[right]]),
        np.array([lam_left, lam_right]),
        np.array([slope]),
        near_boundary=min(lam_left, lam_right) < _NEAR_ZERO_WEIGHT,
    )


def _affine_coordinates(points: np.ndarray, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Barycentric coordinates of the projection of x on aff(points), and that projection."""
    base = points[0]
    if points.shape[0] == 1:
        return np.array([1.0]), base.copy()
    span = (points[1:] - base).T
    coef, *_ = np.linalg.lstsq(span, x - base, rcond=None)
    projection = base + span @ coef
    return np.concatenate(([1.0 - coef.sum()], coef)), projection


def hull_nd(
    grid_y: np.ndarray,
    f: np.ndarray,
    x: np.ndarray,
    gradient_guess: Optional[np.ndarray] = None,
    config: Optional[HullConfig] = None,
) -> HullResult:
    """Concave envelope at x by pivoting a supporting affine function over the grid."""
    config = config or HullConfig()
    grid = np.asarray(grid_y, dtype=float)
    values = np.asarray(f, dtype=float).reshape(-1)
    x = np.asarray(x, dtype=float).reshape(-1)
    n, dim = grid.shape
    gradient = np.zeros(dim) if gradient_guess is None else np.array(gradient_guess, dtype=float).reshape(-1)
    scale = 1.0 + np.max(np.abs(grid)) + np.max(np.abs(x))
    slack = config.boundary_slack * scale

    grid_f = values - grid @ gradient
    first = int(np.argmax(grid_f))
    grid_f = grid_f - grid_f[first]
    support = [first]
    seen: set = set()
    limit = config.max_iter_factor * n

    for _ in range(limit):
        lam, projection = _affine_coordinates(grid[support], x)
        offset = x - projection
        if np.linalg.norm(offset) <= slack:
            if np.all(lam > 0.0):
                order = np.argsort(support)
                chosen = np.asarray(support)[order]
                lam = lam[order]
                value = float(lam @ values[chosen])
                return HullResult(value, chosen, lam, gradient, near_boundary=bool(lam.min() < _NEAR_ZERO_WEIGHT))
            drop = int(np.argmin(lam))
            support.pop(drop)
        else:
            along = (grid - projection) @ offset
            rising = along > config.pivot_tol * scale * np.linalg.norm(offset)
            if not rising.any():
                raise OutOfHullError()
            ratio = np.full(n, -np.inf)
            ratio[rising] = grid_f[rising] / along[rising]
            pick = int(np.argmax(ratio))
            shift = -grid_f[pick] / along[pick]
            grid_f = grid_f + shift * along
            grid_f[pick] = 0.0
            gradient = gradient - shift * offset
            support.append(pick)
        key = (frozenset(support), gradient.tobytes())
        if key in seen:
            raise HullLoopError(f"support cycle at x={x.tolist()} with support {sorted(support)}")
        seen.add(key)
    raise HullLoopError(f"concave hull exceeded {limit} iterations at x={x.tolist()}")


def hull_at(
    grid_y: np.ndarray,
    f: np.ndarray,
    x: np.ndarray,
    gradient_guess: Optional[np.ndarray] = None,
    config: Optional[HullConfig] = None,
) -> HullResult:
    """Dispatch to the 1D chain or the general pivoting routine."""
    grid = np.asarray(grid_y, dtype=float)
    if grid.ndim == 1 or grid.shape[1] == 1:
        return hull_1d(grid.reshape(-1), f, float(np.asarray(x).reshape(-1)[0]), config)
    return hull_nd(grid, f, x, gradient_guess, config)


def argconc_support(
    grid_y: np.ndarray, f: np.ndarray, x: np.ndarray, gradient_guess: Optional[np.ndarray] = None
) -> Tuple[np.ndarray, np.ndarray]:
    result = hull_at(grid_y, f, x, gradient_guess)
    return result.support, result.barycentric_coefficients
