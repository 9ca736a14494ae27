from enum import Enum
from pathlib import Path
from typing import Annotated, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from puq.schemas.data import GaussianMixtureConfig
from puq.schemas.models import MAX_TAPS, AblationMode, MetaMode
from puq.schemas.training import CorruptionConfig, MetaTrainConfig, SgdConfig
from puq.services.uqmetrics import METRIC_MAP, MetricKind


class Task(str, Enum):
    TRAIN_BASE = "TrainBase"
    TRAIN_META = "TrainMeta"
    EVAL_OOD = "EvalOod"
    EVAL_MISCLASS = "EvalMisclass"
    TRANSFER = "Transfer"
    ABLATE = "Ablate"
    SELF_CHECK = "SelfCheck"


class DataSourceKind(str, Enum):
    SYNTHETIC = "synthetic"
    IDX = "idx"
    CACHE = "cache"


class OodSourceKind(str, Enum):
    SHIFTED = "shifted"
    CORRUPTED = "corrupted"
    IDX = "idx"
    CACHE = "cache"


class _StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SyntheticSource(_StrictModel):
    source: Literal[DataSourceKind.SYNTHETIC] = DataSourceKind.SYNTHETIC
    mixture: GaussianMixtureConfig = Field(default_factory=GaussianMixtureConfig)


class IdxSource(_StrictModel):
    source: Literal[DataSourceKind.IDX] = DataSourceKind.IDX
    train_images: str
    train_labels: str
    test_images: str
    test_labels: str
    num_classes: int = Field(default=10, ge=2, le=256)


class CacheSource(_StrictModel):
    source: Literal[DataSourceKind.CACHE] = DataSourceKind.CACHE
    train: str = Field(description="PUQF cache with the training (or target-task) features")
    test: Optional[str] = Field(
        default=None, description="Optional test cache; the train cache is split 80/20 when omitted"
    )


DataSource = Annotated[
    Union[SyntheticSource, IdxSource, CacheSource],
    Field(discriminator="source"),
]


class ShiftedOod(_StrictModel):
    source: Literal[OodSourceKind.SHIFTED] = OodSourceKind.SHIFTED


class CorruptedOod(_StrictModel):
    source: Literal[OodSourceKind.CORRUPTED] = OodSourceKind.CORRUPTED
    corruption: Optional[CorruptionConfig] = Field(
        default=None,
        description="Defaults to blur/permutation/contrast for images and to the vector set otherwise",
    )


class IdxOod(_StrictModel):
    source: Literal[OodSourceKind.IDX] = OodSourceKind.IDX
    images: str
    labels: str


class CacheOod(_StrictModel):
    source: Literal[OodSourceKind.CACHE] = OodSourceKind.CACHE
    path: str


OodSource = Annotated[
    Union[ShiftedOod, CorruptedOod, IdxOod, CacheOod],
    Field(discriminator="source"),
]


class BaseTrainSettings(_StrictModel):
    hidden_widths: tuple[int, ...] = Field(default=(256, 128, 64), min_length=1)
    tap_layers: tuple[int, ...] = Field(default=(0, 1, 2), min_length=1, max_length=MAX_TAPS)
    sgd: SgdConfig = Field(default_factory=lambda: SgdConfig.preset("mnist-base"))


class MetaSettings(_StrictModel):
    mode: MetaMode = MetaMode.DIRICHLET
    logit_clamp: float = Field(default=15.0, gt=0.0)
    train: MetaTrainConfig = Field(default_factory=MetaTrainConfig)


class ModelPaths(_StrictModel):
    base: Optional[str] = Field(default=None, description="PUQB artifact read by meta/eval tasks")
    meta: Optional[str] = Field(default=None, description="PUQM artifact read by eval tasks")


class RunConfig(_StrictModel):
    """One CLI invocation; defaults are resolved before the run and echoed into reports."""

    task: Task
    seed: int = Field(ge=0, lt=2**64)
    output: str = "runs/latest"
    data: Optional[DataSource] = None
    ood: Optional[OodSource] = None
    base: BaseTrainSettings = Field(default_factory=BaseTrainSettings)
    meta: MetaSettings = Field(default_factory=MetaSettings)
    models: ModelPaths = Field(default_factory=ModelPaths)
    metrics: Optional[list[MetricKind]] = None
    ablation: Optional[AblationMode] = None
    dump_alpha: bool = False
    export_cache: bool = Field(default=False, description="train-base also writes PUQF caches of its taps")
    export_csv: bool = Field(default=False, description="train-base also writes the datasets as CSV")

    @field_validator("metrics", mode="before")
    @classmethod
    def accept_short_labels(cls, value):
        if not isinstance(value, list):
            return value
        labels = {metric.label: kind.value for kind, metric in METRIC_MAP.items()}
        return [labels.get(item, item) if isinstance(item, str) else item for item in value]

    @model_validator(mode="after")
    def validate_task(self) -> "RunConfig":
        task = self.task
        if task is Task.SELF_CHECK:
            return self
        if self.data is None:
            raise ValueError(f"task {task.value} needs a data source")
        uses_cache = self.data.source is DataSourceKind.CACHE
        if task is Task.TRAIN_BASE and uses_cache:
            raise ValueError("train-base needs raw inputs, not a feature cache")
        if task is Task.TRANSFER:
            if not uses_cache:
                raise ValueError("transfer trains on a target-task feature cache (data.source = cache)")
            if self.ood is None or self.ood.source is not OodSourceKind.CACHE:
                raise ValueError("transfer needs an OOD feature cache (ood.source = cache)")
        needs_base = task in (Task.TRAIN_META, Task.EVAL_OOD, Task.EVAL_MISCLASS, Task.ABLATE)
        if needs_base and not uses_cache and self.models.base is None:
            raise ValueError(f"task {task.value} needs models.base unless data.source is cache")
        if task in (Task.EVAL_OOD, Task.EVAL_MISCLASS) and self.models.meta is None:
            raise ValueError(f"task {task.value} needs models.meta")
        if task in (Task.EVAL_OOD, Task.ABLATE) and self.ood is None:
            raise ValueError(f"task {task.value} needs an ood source")
        if self.ood is not None:
            if self.ood.source is OodSourceKind.SHIFTED and self.data.source is not DataSourceKind.SYNTHETIC:
                raise ValueError("a shifted OOD cluster needs a synthetic data source")
            if self.ood.source is OodSourceKind.CACHE and not uses_cache:
                raise ValueError("an OOD feature cache needs a cache data source")
            if self.ood.source is OodSourceKind.IDX and self.data.source is not DataSourceKind.IDX:
                raise ValueError("IDX OOD files need an IDX data source")
        if task is Task.ABLATE:
            if self.ablation is None:
                raise ValueError("ablate needs an ablation mode (--mode or 'ablation')")
        return self

    def input_paths(self) -> dict[str, str]:
        """Files this task reads, keyed by their dotted config path."""
        paths: dict[str, str] = {}
        if self.task is Task.SELF_CHECK or self.data is None:
            return paths
        if isinstance(self.data, IdxSource):
            for name in ("train_images", "train_labels", "test_images", "test_labels"):
                paths[f"data.{name}"] = getattr(self.data, name)
        elif isinstance(self.data, CacheSource):
            paths["data.train"] = self.data.train
            if self.data.test is not None:
                paths["data.test"] = self.data.test
        if isinstance(self.ood, IdxOod):
            paths["ood.images"] = self.ood.images
            paths["ood.labels"] = self.ood.labels
        elif isinstance(self.ood, CacheOod):
            paths["ood.path"] = self.ood.path
        if self.task is not Task.TRAIN_BASE and self.models.base is not None:
            paths["models.base"] = self.models.base
        if self.task in (Task.EVAL_OOD, Task.EVAL_MISCLASS) and self.models.meta is not None:
            paths["models.meta"] = self.models.meta
        return paths

    def missing_files(self) -> list[str]:
        return [
            f"{field}: file not found: {path}"
            for field, path in self.input_paths().items()
            if not Path(path).is_file()
        ]
