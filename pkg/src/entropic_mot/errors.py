from __future__ import annotations

from typing import Sequence


class MotError(Exception):
    """Base class for every error raised by the solver suite."""


class InstanceError(MotError, ValueError):
    pass


class UnsupportedDimensionError(MotError, ValueError):
    def __init__(self, dim: int, operation: str) -> None:
        super().__init__(f"{operation} does not support dimension {dim}")
        self.dim = dim


class InfeasibleMartingaleError(MotError, ValueError):
    """Some x does not lie in the relative interior of the hull of its active y's."""

    def __init__(self, x_indices: Sequence[int]) -> None:
        indices = [int(i) for i in x_indices]
        shown = ", ".join(str(i) for i in indices[:10])
        more = f" (+{len(indices) - 10} more)" if len(indices) > 10 else ""
        super().__init__(f"x outside the convex hull of its active y points at index {shown}{more}")
        self.x_indices = indices


class IterationLimitError(MotError, RuntimeError):
    pass


class OutOfHullError(MotError, ValueError):
    def __init__(self, message: str = "x not in the convex hull of grid.") -> None:
        super().__init__(message)


class HullLoopError(MotError, RuntimeError):
    pass


class ProblemSizeError(MotError, ValueError):
    pass
