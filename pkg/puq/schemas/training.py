from enum import Enum
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator


class StopMetric(str, Enum):
    OOD_AUROC = "OodAuroc"
    MISCLASS_AUROC = "MisclassAuroc"
    VAL_LOSS = "ValLoss"


class CorruptionKind(str, Enum):
    PIXEL_PERMUTATION = "PixelPermutation"
    GAUSSIAN_BLUR = "GaussianBlur"
    CONTRAST_RESCALE = "ContrastRescale"
    GAUSSIAN_NOISE = "GaussianNoise"


SgdPreset = Literal["mnist-base", "mnist-meta", "cifar-meta", "transfer-meta"]

# epochs, batch size, lr, momentum, weight decay
_SGD_PRESETS: dict[str, tuple[int, int, float, float, float]] = {
    "mnist-base": (20, 128, 0.01, 0.9, 5e-4),
    "mnist-meta": (50, 128, 0.1, 0.9, 5e-4),
    "cifar-meta": (50, 128, 0.001, 0.9, 1e-4),
    "transfer-meta": (50, 128, 0.01, 0.9, 1e-4),
}


class SgdConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    learning_rate: float = Field(default=0.01, gt=0.0, description="Step size lr")
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0, description="Heavy-ball momentum m")
    weight_decay: float = Field(default=5e-4, ge=0.0, description="L2 coefficient added to gradients")
    batch_size: int = Field(default=128, ge=1)
    max_epochs: int = Field(default=20, ge=0)
    seed: int = Field(default=0, ge=0, description="Run seed; epoch shuffles derive from (seed, epoch)")

    @classmethod
    def preset(cls, name: SgdPreset, **overrides) -> "SgdConfig":
        epochs, batch_size, lr, momentum, wd = _SGD_PRESETS[name]
        values = {
            "max_epochs": epochs,
            "batch_size": batch_size,
            "learning_rate": lr,
            "momentum": momentum,
            "weight_decay": wd,
        }
        values.update(overrides)
        return cls(**values)


class ElboConfig(BaseModel):
    model_config = ConfigDict(frozen=True, populate_by_name=True)

    lam: Optional[float] = Field(
        default=None,
        alias="lambda",
        ge=0.0,
        allow_inf_nan=False,
        description="KL weight; resolved from the training-set size when omitted",
    )
    beta: Optional[list[float]] = Field(
        default=None,
        description="Prior concentration; all-ones of length K when omitted",
    )

    @model_validator(mode="after")
    def validate_beta(self) -> "ElboConfig":
        if self.beta is not None and any(not value > 0 for value in self.beta):
            raise ValueError("beta entries must be positive")
        return self

    def resolved_lambda(self, n_train: int) -> float:
        if self.lam is not None:
            return self.lam
        return 1e-1 if n_train < 10_000 else 1e-3

    def resolved_beta(self, num_classes: int) -> list[float]:
        if self.beta is None:
            return [1.0] * num_classes
        if len(self.beta) != num_classes:
            raise ValueError(
                f"beta has length {len(self.beta)} but the task has {num_classes} classes"
            )
        return list(self.beta)


class CorruptionConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    pixel_permutation: bool = True
    gaussian_blur: bool = False
    contrast_rescale: bool = True
    gaussian_noise: bool = True
    blur_sigma: float = Field(default=2.0, gt=0.0)
    contrast_factor: float = Field(default=0.3, ge=0.0)
    noise_scale: float = Field(default=2.0, ge=0.0, description="Multiple of the per-feature std")
    image_shape: Optional[tuple[int, int]] = None

    @model_validator(mode="after")
    def validate_kinds(self) -> "CorruptionConfig":
        if not self.enabled_kinds():
            raise ValueError("at least one corruption must be enabled")
        if self.gaussian_blur and self.image_shape is None:
            raise ValueError("gaussian_blur requires image_shape")
        return self

    def enabled_kinds(self) -> list[CorruptionKind]:
        flags = (
            (self.pixel_permutation, CorruptionKind.PIXEL_PERMUTATION),
            (self.gaussian_blur, CorruptionKind.GAUSSIAN_BLUR),
            (self.contrast_rescale, CorruptionKind.CONTRAST_RESCALE),
            (self.gaussian_noise, CorruptionKind.GAUSSIAN_NOISE),
        )
        return [kind for enabled, kind in flags if enabled]

    @classmethod
    def for_images(cls, image_shape: tuple[int, int], **overrides) -> "CorruptionConfig":
        values = {
            "pixel_permutation": True,
            "gaussian_blur": True,
            "contrast_rescale": True,
            "gaussian_noise": False,
            "image_shape": image_shape,
        }
        values.update(overrides)
        return cls(**values)


class MetaTrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    elbo: ElboConfig = Field(default_factory=ElboConfig)
    sgd: SgdConfig = Field(
        default_factory=lambda: SgdConfig(
            learning_rate=0.1, momentum=0.9, weight_decay=5e-4, batch_size=128, max_epochs=50
        )
    )
    val_fraction: float = Field(default=0.2, gt=0.0, le=0.5)
    patience: int = Field(default=10, ge=1)
    stop_metric: StopMetric = StopMetric.OOD_AUROC
    corruption: CorruptionConfig = Field(default_factory=CorruptionConfig)
    data_fraction: float = Field(default=1.0, gt=0.0, le=1.0)
    max_grad_norm: Optional[float] = Field(
        default=5.0, gt=0.0, description="Joint L2 bound on each batch gradient; null disables clipping"
    )
