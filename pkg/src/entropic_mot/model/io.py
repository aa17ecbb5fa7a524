"""Instance documents: JSON-compatible files describing (mu, nu, c)."""
from __future__ import annotations

import json
from pathlib import Path
from typing import List, Optional

import numpy as np
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from ..errors import InstanceError
from .measures import COST_KINDS, CostSpec, DiscreteMeasure, MotInstance


class MeasureDocument(BaseModel):
    points: List[List[float]]
    weights: List[float]

    @field_validator("points", mode="before")
    @classmethod
    def _lift_scalars(cls, value):  # type: ignore[no-untyped-def]
        return [[p] if isinstance(p, (int, float)) else p for p in value]

    @model_validator(mode="after")
    def _same_length(self) -> "MeasureDocument":
        if len(self.points) != len(self.weights):
            raise ValueError(f"{len(self.points)} points but {len(self.weights)} weights")
        return self


class CostDocument(BaseModel):
    kind: str
    matrix: Optional[List[List[float]]] = None

    @field_validator("kind")
    @classmethod
    def _known_kind(cls, value: str) -> str:
        if value not in COST_KINDS:
            raise ValueError(f"unknown cost kind '{value}', expected one of {', '.join(COST_KINDS)}")
        return value


class InstanceDocument(BaseModel):
    dim: int = Field(gt=0)
    mu: MeasureDocument
    nu: MeasureDocument
    cost: CostDocument

    def to_instance(self) -> MotInstance:
        matrix = np.array(self.cost.matrix, dtype=float) if self.cost.matrix is not None else None
        return MotInstance(
            mu=DiscreteMeasure.from_arrays(self.mu.points, self.mu.weights),
            nu=DiscreteMeasure.from_arrays(self.nu.points, self.nu.weights),
            cost=CostSpec(kind=self.cost.kind, matrix=matrix),
        )

    @classmethod
    def from_instance(cls, inst: MotInstance) -> "InstanceDocument":
        matrix = inst.cost.matrix.tolist() if inst.cost.matrix is not None else None
        return cls(
            dim=inst.dim,
            mu=MeasureDocument(points=inst.mu.points.tolist(), weights=inst.mu.weights.tolist()),
            nu=MeasureDocument(points=inst.nu.points.tolist(), weights=inst.nu.weights.tolist()),
            cost=CostDocument(kind=inst.cost.kind, matrix=matrix),
        )


def load_instance(path: str | Path) -> MotInstance:
    with Path(path).expanduser().open("r", encoding="utf-8") as handle:
        try:
            raw = json.load(handle)
        except json.JSONDecodeError as exc:
            raise InstanceError(f"instance document {path} is not JSON: {exc}") from exc
    try:
        document = InstanceDocument.model_validate(raw)
    except ValidationError as exc:
        raise InstanceError(f"invalid instance document {path}: {exc}") from exc
    if any(len(p) != document.dim for p in document.mu.points + document.nu.points):
        raise InstanceError(f"invalid instance document {path}: point dimension differs from dim={document.dim}")
    return document.to_instance()


def save_instance(inst: MotInstance, path: str | Path) -> Path:
    target = Path(path).expanduser()
    target.parent.mkdir(parents=True, exist_ok=True)
    document = InstanceDocument.from_instance(inst)
    with target.open("w", encoding="utf-8") as handle:
        json.dump(document.model_dump(), handle, indent=1)
    return target
