import math
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator


class GaussianMixtureConfig(BaseModel):
    """Isotropic class clusters plus one displaced OOD cluster."""

    model_config = ConfigDict(frozen=True)

    num_classes: int = Field(default=3, ge=2)
    means: Optional[list[list[float]]] = Field(
        default=None,
        description="Per-class means; defaults to an equilateral triangle of side 6*sigma in 2-D",
    )
    sigma: float = Field(default=1.0, gt=0.0)
    samples_per_class: int = Field(default=500, ge=2)
    ood_shift: Optional[list[float]] = Field(
        default=None,
        description="Displacement of the OOD cluster from the ID centroid; defaults to 10*sigma downwards",
    )
    ood_samples: Optional[int] = Field(default=None, ge=1)

    @model_validator(mode="after")
    def validate_geometry(self) -> "GaussianMixtureConfig":
        means = self.resolved_means()
        if len(means) != self.num_classes:
            raise ValueError(f"{len(means)} means given for {self.num_classes} classes")
        dims = {len(mean) for mean in means}
        if len(dims) != 1:
            raise ValueError("all class means must have the same dimension")
        if len({tuple(mean) for mean in means}) != len(means):
            raise ValueError("class means must be pairwise distinct")
        if len(self.resolved_shift()) != dims.pop():
            raise ValueError("ood_shift must match the mean dimension")
        return self

    def resolved_means(self) -> list[list[float]]:
        if self.means is not None:
            return [list(mean) for mean in self.means]
        if self.num_classes != 3:
            raise ValueError("default geometry is defined for 3 classes; pass means explicitly")
        radius = 6.0 * self.sigma / math.sqrt(3.0)
        angles = (math.pi / 2, math.pi / 2 + 2 * math.pi / 3, math.pi / 2 + 4 * math.pi / 3)
        return [[radius * math.cos(angle), radius * math.sin(angle)] for angle in angles]

    def resolved_shift(self) -> list[float]:
        if self.ood_shift is not None:
            return list(self.ood_shift)
        dim = len(self.resolved_means()[0])
        return [0.0] * (dim - 1) + [-10.0 * self.sigma]

    @property
    def input_dim(self) -> int:
        return len(self.resolved_means()[0])
