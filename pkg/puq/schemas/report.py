from pathlib import Path
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from puq.core.errors import FormatError
from puq.core.files import atomic_write_bytes


class MetricResult(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: str = Field(description="Metric label, e.g. MutualInformation or base:Entropy")
    auroc: float = Field(ge=0.0, le=1.0)
    aupr: float = Field(ge=0.0, le=1.0)


class ExperimentReport(BaseModel):
    """Result of one evaluation run.

    Floats are written with the shortest repr that reads back to the same
    double, so ``from_json(to_json())`` is exact.
    """

    task: str
    seed: int = Field(ge=0)
    accuracy: float = Field(ge=0.0, le=1.0, description="Meta-model accuracy on the ID test set")
    ece: float = Field(ge=0.0, le=1.0)
    metrics: List[MetricResult] = Field(default_factory=list)
    baseline: List[MetricResult] = Field(
        default_factory=list, description="Base-model Entropy/MaxProb rows when a live base model is used"
    )
    alpha_dump: Optional[List[List[float]]] = Field(
        default=None, description="Per-sample concentrations of the ID test set"
    )
    metadata: Dict[str, Any] = Field(default_factory=dict)

    def metric(self, kind: str) -> MetricResult:
        for result in self.metrics:
            if result.kind == kind:
                return result
        raise KeyError(kind)

    def to_json(self) -> str:
        return self.model_dump_json(indent=2)

    @classmethod
    def from_json(cls, payload: str | bytes) -> "ExperimentReport":
        try:
            return cls.model_validate_json(payload)
        except ValidationError as exc:
            raise FormatError(f"invalid report: {exc}") from exc

    def write(self, path: str | Path) -> Path:
        return atomic_write_bytes(path, (self.to_json() + "\n").encode("utf-8"))

    @classmethod
    def read(cls, path: str | Path) -> "ExperimentReport":
        try:
            payload = Path(path).read_bytes()
        except OSError as exc:
            raise FormatError(f"cannot read {path}: {exc}") from exc
        return cls.from_json(payload)
