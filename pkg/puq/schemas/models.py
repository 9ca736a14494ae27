from enum import Enum

from pydantic import BaseModel, ConfigDict, Field, model_validator

MAX_TAPS = 5


class MetaMode(str, Enum):
    DIRICHLET = "Dirichlet"
    LINEAR_META = "LinearMeta"
    CROSS_ENT = "CrossEnt"
    LAST_LAYER = "LastLayer"

    @property
    def uses_elbo(self) -> bool:
        return self in (MetaMode.DIRICHLET, MetaMode.LINEAR_META)

    @property
    def single_tap(self) -> bool:
        return self in (MetaMode.LINEAR_META, MetaMode.LAST_LAYER)


class BaseModelSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    input_dim: int = Field(ge=1)
    hidden_widths: tuple[int, ...] = Field(default=(256, 128, 64), min_length=1)
    num_classes: int = Field(ge=2)
    tap_layers: tuple[int, ...] = Field(default=(0, 1, 2), min_length=1, max_length=MAX_TAPS)

    @model_validator(mode="after")
    def validate_taps(self) -> "BaseModelSpec":
        if any(width < 1 for width in self.hidden_widths):
            raise ValueError("hidden widths must be positive")
        taps = self.tap_layers
        if any(later <= earlier for earlier, later in zip(taps, taps[1:])):
            raise ValueError("tap_layers must be strictly increasing")
        if taps[0] < 0 or taps[-1] >= len(self.hidden_widths):
            raise ValueError(
                f"tap_layers must index hidden layers 0..{len(self.hidden_widths) - 1}"
            )
        return self

    @property
    def tap_dims(self) -> tuple[int, ...]:
        return tuple(self.hidden_widths[index] for index in self.tap_layers)


class MetaModelSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    tap_dims: tuple[int, ...] = Field(min_length=1, max_length=MAX_TAPS)
    num_classes: int = Field(ge=2)
    mode: MetaMode = MetaMode.DIRICHLET
    logit_clamp: float = Field(default=15.0, gt=0.0)

    @model_validator(mode="after")
    def validate_mode(self) -> "MetaModelSpec":
        if any(dim < 1 for dim in self.tap_dims):
            raise ValueError("tap dimensions must be positive")
        if self.mode.single_tap and len(self.tap_dims) != 1:
            raise ValueError(f"{self.mode.value} mode uses exactly the final tap")
        return self

    @classmethod
    def for_mode(
        cls, tap_dims: tuple[int, ...], num_classes: int, mode: MetaMode, **kwargs
    ) -> "MetaModelSpec":
        dims = tuple(tap_dims[-1:]) if mode.single_tap else tuple(tap_dims)
        return cls(tap_dims=dims, num_classes=num_classes, mode=mode, **kwargs)


class AblationMode(str, Enum):
    FULL = "Full"
    LINEAR_META = "LinearMeta"
    CROSS_ENT = "CrossEnt"
    LAST_LAYER = "LastLayer"
    TEN_PERCENT_DATA = "TenPercentData"

    @property
    def meta_mode(self) -> MetaMode:
        if self in (AblationMode.FULL, AblationMode.TEN_PERCENT_DATA):
            return MetaMode.DIRICHLET
        return MetaMode(self.value)
