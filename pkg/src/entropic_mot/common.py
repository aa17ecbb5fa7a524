from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Sequence, TypeVar

import yaml

T = TypeVar("T")
R = TypeVar("R")

A_WEIGHT_CHOICES = ("ones", "nu", "nu2", "nu_over_psi0")
ANCHOR_CHOICES = ("zero", "psi0")
TRUNCATION_RULES = ("min", "mu", "nu")
SOLVER_CHOICES = ("bregman", "newton", "hybrid")


@dataclass
class EntropicConfig:
    h_tol: float = 1e-11
    max_h_iters: int = 50
    truncation_factor: float = 1e-7
    truncation_rule: str = "min"
    truncation_max_epsilon: float = 1e-2
    truncation_mass_warning: float = 1e-5

    def __post_init__(self) -> None:
        if self.truncation_rule not in TRUNCATION_RULES:
            raise ValueError(f"truncation_rule must be one of {TRUNCATION_RULES}, got '{self.truncation_rule}'")
        if self.h_tol <= 0 or self.max_h_iters < 1:
            raise ValueError("h_tol must be positive and max_h_iters at least 1")


@dataclass
class StopRule:
    grad_tol: float = 1e-2
    max_iters: int = 10_000

    def __post_init__(self) -> None:
        if self.grad_tol <= 0:
            raise ValueError("grad_tol must be positive")


@dataclass
class NewtonConfig:
    cg_max_iters: int = 200
    forcing_cap: float = 0.5
    c1: float = 1e-4
    c2: float = 0.9
    max_bisections: int = 30
    alpha: float = 1e-2
    a_weights: str = "nu2"
    anchor: str = "zero"
    psi0_floor: float = 1e-8
    grad_tol: float = 1e-6
    max_outer_iters: int = 500

    def __post_init__(self) -> None:
        if not 0.0 < self.c1 < self.c2 < 1.0:
            raise ValueError(f"Wolfe constants need 0 < c1 < c2 < 1, got c1={self.c1}, c2={self.c2}")
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        if self.a_weights not in A_WEIGHT_CHOICES:
            raise ValueError(f"a_weights must be one of {A_WEIGHT_CHOICES}, got '{self.a_weights}'")
        if self.anchor not in ANCHOR_CHOICES:
            raise ValueError(f"anchor must be one of {ANCHOR_CHOICES}, got '{self.anchor}'")
        if not 0.0 < self.forcing_cap <= 1.0:
            raise ValueError("forcing_cap must lie in (0, 1]")


@dataclass(frozen=True)
class GridStage:
    """Grid size (points per axis) used once epsilon drops to ``eps_threshold``."""

    eps_threshold: float
    size: int


def _default_grid_1d() -> List[GridStage]:
    return [GridStage(1.0, 10), GridStage(0.1, 40), GridStage(0.02, 100), GridStage(5e-3, 250), GridStage(1e-3, 500), GridStage(4e-4, 1000)]


def _default_grid_2d() -> List[GridStage]:
    return [GridStage(1.0, 10), GridStage(0.05, 20), GridStage(0.01, 40), GridStage(2e-3, 80)]


@dataclass
class ScheduleConfig:
    eps_start: float = 1.0
    eps_target: float = 1e-3
    eps_factor: float = 2.0
    stage_grad_tol: float = 1e-2
    final_grad_tol: float = 1e-4
    stage_max_iters: int = 5_000
    solver: str = "hybrid"
    switch_ratio: float = 2.0
    switch_max_iters: int = 100
    small_error: float = 0.1
    small_error_ratio: float = 1.1
    truncate: bool = True
    grid_1d: List[GridStage] = field(default_factory=_default_grid_1d)
    grid_2d: List[GridStage] = field(default_factory=_default_grid_2d)

    def __post_init__(self) -> None:
        if not 0.0 < self.eps_target <= self.eps_start:
            raise ValueError(f"need 0 < eps_target <= eps_start, got {self.eps_target} and {self.eps_start}")
        if self.eps_factor <= 1.0:
            raise ValueError("eps_factor must exceed 1")
        if self.stage_grad_tol <= 0 or self.final_grad_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.solver not in SOLVER_CHOICES:
            raise ValueError(f"solver must be one of {SOLVER_CHOICES}, got '{self.solver}'")

    def epsilons(self) -> List[float]:
        """Stage epsilons from eps_start down to eps_target, the last one clamped."""
        values = [self.eps_start]
        while values[-1] > self.eps_target * (1.0 + 1e-12):
            values.append(max(values[-1] / self.eps_factor, self.eps_target))
        return values

    def grid_size(self, epsilon: float, dim: int) -> int:
        stages = self.grid_1d if dim == 1 else self.grid_2d
        size = stages[0].size
        for stage in sorted(stages, key=lambda s: -s.eps_threshold):
            if epsilon <= stage.eps_threshold * (1.0 + 1e-12):
                size = stage.size
        return size


@dataclass
class SemidualConfig:
    c0: float = 1.0
    n_max: int = 10_000
    tol: float = 1e-10

    def __post_init__(self) -> None:
        if self.c0 <= 0:
            raise ValueError("c0 must be positive")


@dataclass
class RepairConfig:
    epsilon: float = 1e-2
    alphas: List[float] = field(default_factory=lambda: [2.0**-k for k in range(1, 15)])
    a_weights: str = "nu"
    stable_change: float = 0.01
    grad_tol: float = 1e-8

    def __post_init__(self) -> None:
        if any(a <= 0 for a in self.alphas) or any(b >= a for a, b in zip(self.alphas, self.alphas[1:])):
            raise ValueError("alphas must be positive and strictly decreasing")
        if self.a_weights not in A_WEIGHT_CHOICES[:3]:
            raise ValueError(f"repair a_weights must be one of {A_WEIGHT_CHOICES[:3]}")


@dataclass
class HullConfig:
    boundary_slack: float = 1e-9
    pivot_tol: float = 1e-12
    max_iter_factor: int = 50


@dataclass
class RuntimeConfig:
    threads: int = 1
    seed: int = 0
    out_dir: str = "results"
    log_level: str = "INFO"


@dataclass
class SolverSettings:
    entropic: EntropicConfig = field(default_factory=EntropicConfig)
    sinkhorn: StopRule = field(default_factory=StopRule)
    newton: NewtonConfig = field(default_factory=NewtonConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    semidual: SemidualConfig = field(default_factory=SemidualConfig)
    repair: RepairConfig = field(default_factory=RepairConfig)
    hull: HullConfig = field(default_factory=HullConfig)
    runtime: RuntimeConfig = field(default_factory=RuntimeConfig)

    @classmethod
    def from_file(cls, path: str | Path) -> "SolverSettings":
        with Path(path).expanduser().open("r", encoding="utf-8") as handle:
            raw = yaml.safe_load(handle) or {}
        return cls.from_mapping(raw)

    @classmethod
    def from_mapping(cls, raw: Mapping[str, Any]) -> "SolverSettings":
        schedule_raw = dict(raw.get("schedule", {}) or {})
        for key in ("grid_1d", "grid_2d"):
            if key in schedule_raw:
                schedule_raw[key] = [GridStage(float(eps), int(size)) for eps, size in schedule_raw[key]]
        return cls(
            entropic=_build(EntropicConfig, raw.get("entropic")),
            sinkhorn=_build(StopRule, raw.get("sinkhorn")),
            newton=_build(NewtonConfig, raw.get("newton")),
            schedule=_build(ScheduleConfig, schedule_raw),
            semidual=_build(SemidualConfig, raw.get("semidual")),
            repair=_build(RepairConfig, raw.get("repair")),
            hull=_build(HullConfig, raw.get("hull")),
            runtime=_build(RuntimeConfig, raw.get("runtime")),
        )

    def to_mapping(self) -> Dict[str, Any]:
        return asdict(self)


def _build(kind: type, raw: Optional[Mapping[str, Any]]) -> Any:
    """Instantiate a config record, casting each known key to the default's type."""
    defaults = kind()
    values: Dict[str, Any] = {}
    for key, value in (raw or {}).items():
        if not hasattr(defaults, key):
            raise ValueError(f"unknown setting '{key}' for {kind.__name__}")
        current = getattr(defaults, key)
        if isinstance(current, bool):
            values[key] = bool(value)
        elif isinstance(current, (int, float)) and not isinstance(value, list):
            values[key] = type(current)(value)
        elif isinstance(current, list) and value and not isinstance(value[0], GridStage):
            values[key] = [float(v) for v in value]
        else:
            values[key] = value
    return kind(**values)


@dataclass
class SweepRecord:
    iteration: int
    seconds: float
    grad_error: float
    dual_value: float
    h_iters: int = 0


@dataclass
class SweepLog:
    """Per-iteration trace shared by the Bregman and Newton loops."""

    records: List[SweepRecord] = field(default_factory=list)

    CSV_HEADER = ("iter", "seconds", "grad_error", "dual_value", "h_iters")

    def append(self, record: SweepRecord) -> None:
        self.records.append(record)

    def extend(self, other: "SweepLog") -> None:
        offset = self.records[-1].iteration if self.records else 0
        for record in other.records:
            self.records.append(
                SweepRecord(record.iteration + offset, record.seconds, record.grad_error, record.dual_value, record.h_iters)
            )

    def __len__(self) -> int:
        return len(self.records)

    @property
    def last_error(self) -> Optional[float]:
        return self.records[-1].grad_error if self.records else None

    def dual_values(self) -> List[float]:
        return [r.dual_value for r in self.records]

    def grad_errors(self) -> List[float]:
        return [r.grad_error for r in self.records]

    def monotone_violations(self, slack: float = 1e-12) -> int:
        values = self.dual_values()
        return sum(1 for a, b in zip(values, values[1:]) if b > a + slack * (1.0 + abs(a)))

    def rows(self) -> List[tuple]:
        return [(r.iteration, r.seconds, r.grad_error, r.dual_value, r.h_iters) for r in self.records]


def parallel_map(fn: Callable[[T], R], items: Sequence[T] | Iterable[T], threads: int = 1) -> List[R]:
    """Ordered map; results come back in input order whatever the thread count."""
    if threads <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
