from __future__ import annotations

import csv
import json
import logging
from pathlib import Path
from typing import Iterable, List, Sequence, Tuple

import numpy as np

from ..common import SweepLog
from ..entropic.core import EntropicProblem, kernel_entries, nearest_indices
from ..model.measures import DualState
from ..solvers.hybrid import SolveReport
from .diagnostics import BenchRow, GapRow

logger = logging.getLogger(__name__)

COUPLING_FLOOR = 1e-10


def _fmt(value) -> str:  # type: ignore[no-untyped-def]
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return str(value)


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])
    return path


def _axis_names(prefix: str, dim: int) -> List[str]:
    return [prefix] if dim == 1 else [f"{prefix}{k + 1}" for k in range(dim)]


def conditional_slice(prob: EntropicProblem, state: DualState, x: Sequence[float]) -> Tuple[int, np.ndarray, np.ndarray]:
    """Normalized kernel row at the grid point nearest to ``x``: (x index, y points, weights)."""
    point = np.asarray(x, dtype=float).reshape(1, -1)
    xi = int(nearest_indices(prob.inst.mu.points, point)[0])
    p = kernel_entries(prob, state)
    lo, hi = prob.active.indptr[xi], prob.active.indptr[xi + 1]
    weights = p[lo:hi]
    return xi, prob.inst.nu.points[prob.cols[lo:hi]], weights / weights.sum()


def export_coupling(
    prob: EntropicProblem,
    state: DualState,
    path: str | Path,
    slices: Sequence[Sequence[float]] = (),
    floor: float = COUPLING_FLOOR,
) -> List[Path]:
    """Active entries with p >= floor as (x..., y..., p) rows, then one CSV per requested conditional slice."""
    path = Path(path)
    p = kernel_entries(prob, state)
    keep = p >= floor
    dim = prob.dim
    x = prob.inst.mu.points[prob.rows[keep]]
    y = prob.inst.nu.points[prob.cols[keep]]
    header = _axis_names("x", dim) + _axis_names("y", dim) + ["p"]
    written = [write_csv(path, header, (tuple(a) + tuple(b) + (c,) for a, b, c in zip(x, y, p[keep])))]
    logger.info("wrote %d coupling entries to %s", int(keep.sum()), path)

    for k, point in enumerate(slices):
        xi, y_pts, weights = conditional_slice(prob, state, point)
        target = path.with_name(f"{path.stem}_slice{k}{path.suffix}")
        written.append(write_csv(target, _axis_names("y", dim) + ["p"], (tuple(a) + (b,) for a, b in zip(y_pts, weights))))
        logger.info("slice %d at x index %d -> %s", k, xi, target)
    return written


def read_coupling(path: str | Path) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    with Path(path).open(newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        header = next(reader)
        data = np.array([[float(v) for v in row] for row in reader], dtype=float).reshape(-1, len(header))
    dim = (len(header) - 1) // 2
    return data[:, :dim], data[:, dim : 2 * dim], data[:, -1]


def coupling_marginals(x: np.ndarray, y: np.ndarray, p: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Support points and marginal weights recovered from coupling rows."""
    x_pts, x_idx = np.unique(x, axis=0, return_inverse=True)
    y_pts, y_idx = np.unique(y, axis=0, return_inverse=True)
    return (
        x_pts,
        np.bincount(x_idx.reshape(-1), weights=p, minlength=len(x_pts)),
        y_pts,
        np.bincount(y_idx.reshape(-1), weights=p, minlength=len(y_pts)),
    )


def write_sweep_log(log: SweepLog, path: str | Path) -> Path:
    return write_csv(path, SweepLog.CSV_HEADER, log.rows())


def write_gap_curve(rows: Sequence[GapRow], path: str | Path) -> Path:
    return write_csv(path, GapRow.CSV_HEADER, (r.row() for r in rows))


def write_bench(rows: Sequence[BenchRow], path: str | Path) -> Path:
    return write_csv(path, BenchRow.CSV_HEADER, (r.row() for r in rows))


def write_report(report: SolveReport, out_dir: str | Path, run_id: str) -> Path:
    """``<out>/<run_id>/report.json`` plus one sweep-log CSV per stage."""
    folder = Path(out_dir) / run_id
    folder.mkdir(parents=True, exist_ok=True)
    for stage in report.stages:
        write_sweep_log(stage.log, folder / f"stage{stage.index}.csv")
    target = folder / "report.json"
    target.write_text(json.dumps(report.to_document(), indent=2, default=float), encoding="utf-8")
    logger.info("report written to %s", target)
    return target
