"""Task executors behind the CLI subcommands.

Each executor returns the report and the artifacts to write; nothing touches
the output directory until the whole task has succeeded.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional

from puq.core.errors import ConfigurationError, FormatError, ShapeError
from puq.schemas.models import BaseModelSpec, MetaModelSpec
from puq.schemas.report import ExperimentReport
from puq.schemas.run import (
    CacheOod,
    CacheSource,
    CorruptedOod,
    IdxOod,
    IdxSource,
    RunConfig,
    ShiftedOod,
    SyntheticSource,
    Task,
)
from puq.schemas.training import CorruptionConfig, MetaTrainConfig
from puq.services import artifacts, dataio, evalharness, numkernel
from puq.services.basemodel import FrozenBaseModel, build_feature_cache, train_base
from puq.services.corruptions import make_noisy_validation
from puq.services.dataio import Dataset, FeatureCache
from puq.services.metamodel import CacheFeaturizer, Featurizer, MetaModel, build_meta, train_meta
from puq.services.metrics import ece

logger = logging.getLogger(__name__)

Writer = Callable[[Path], Path]


@dataclass
class RunResult:
    report: ExperimentReport
    artifacts: dict[str, Writer] = field(default_factory=dict)


@dataclass
class LoadedData:
    train: Dataset
    test: Dataset
    cache_taps: Optional[tuple[int, ...]] = None


def _split_cache(cache: FeatureCache, seed: int) -> tuple[Dataset, Dataset]:
    train, test = dataio.split(cache.to_dataset(name="cache"), (0.8, 0.2), seed=[seed, 20])
    return train, test


def load_data(config: RunConfig) -> LoadedData:
    source = config.data
    if isinstance(source, SyntheticSource):
        train, test = dataio.gen_gaussian_mixture(source.mixture, config.seed)
        return LoadedData(train, test)
    if isinstance(source, IdxSource):
        train = dataio.load_idx(source.train_images, source.train_labels, source.num_classes, name="idx-train")
        test = dataio.load_idx(source.test_images, source.test_labels, source.num_classes, name="idx-test")
        if train.image_shape != test.image_shape:
            raise FormatError(f"train images are {train.image_shape}, test images are {test.image_shape}")
        return LoadedData(train, test)
    if isinstance(source, CacheSource):
        cache = dataio.read_feature_cache(source.train)
        if source.test is None:
            train, test = _split_cache(cache, config.seed)
        else:
            test_cache = dataio.read_feature_cache(source.test)
            if test_cache.tap_dims != cache.tap_dims or test_cache.num_classes != cache.num_classes:
                raise FormatError(f"test cache {source.test} does not match the schema of {source.train}")
            train = cache.to_dataset(name="cache-train")
            test = test_cache.to_dataset(name="cache-test")
        return LoadedData(train, test, cache_taps=cache.tap_dims)
    raise FormatError("no data source configured")


def load_featurizer(config: RunConfig, data: LoadedData) -> Featurizer:
    if data.cache_taps is not None:
        return CacheFeaturizer(data.cache_taps, data.train.num_classes)
    base = artifacts.load_base_model(config.models.base)
    if base.spec.input_dim != data.train.input_dim:
        raise ShapeError(
            f"base model expects {base.spec.input_dim} inputs, data has {data.train.input_dim}"
        )
    if base.num_classes != data.train.num_classes:
        raise ShapeError(f"base model has {base.num_classes} classes, data has {data.train.num_classes}")
    return base


def load_ood(config: RunConfig, data: LoadedData) -> Dataset:
    ood = config.ood
    if isinstance(ood, ShiftedOod):
        return dataio.gen_ood_shifted(config.data.mixture, config.seed)
    if isinstance(ood, CorruptedOod):
        corruption = ood.corruption
        if corruption is None:
            shape = data.test.image_shape
            corruption = CorruptionConfig.for_images(shape) if shape is not None else CorruptionConfig()
        corrupted = make_noisy_validation(data.test, corruption, seed=[config.seed, 30])
        return corrupted.with_inputs(corrupted.inputs, name="corrupted")
    if isinstance(ood, IdxOod):
        return dataio.load_idx(ood.images, ood.labels, config.data.num_classes, name="idx-ood")
    if isinstance(ood, CacheOod):
        cache = dataio.read_feature_cache(ood.path)
        if cache.tap_dims != data.cache_taps:
            raise FormatError(f"OOD cache taps {cache.tap_dims} do not match data taps {data.cache_taps}")
        return cache.to_dataset(name="ood-cache", is_ood=True)
    raise FormatError("no OOD source configured")


def _meta_train_config(config: RunConfig) -> MetaTrainConfig:
    train_cfg = config.meta.train
    return train_cfg.model_copy(update={"sgd": train_cfg.sgd.model_copy(update={"seed": config.seed})})


def _meta_spec(config: RunConfig, featurizer: Featurizer) -> MetaModelSpec:
    return MetaModelSpec.for_mode(
        featurizer.tap_dims, featurizer.num_classes, config.meta.mode, logit_clamp=config.meta.logit_clamp
    )


def _check_meta(meta: MetaModel, featurizer: Featurizer) -> None:
    expected = MetaModelSpec.for_mode(featurizer.tap_dims, featurizer.num_classes, meta.spec.mode).tap_dims
    if meta.spec.tap_dims != expected or meta.spec.num_classes != featurizer.num_classes:
        raise FormatError(
            f"meta-model (taps {meta.spec.tap_dims}, K={meta.spec.num_classes}) does not fit "
            f"the featurizer (taps {featurizer.tap_dims}, K={featurizer.num_classes})"
        )


def _resolved_elbo(
    report: ExperimentReport, config: RunConfig, data: Optional[LoadedData]
) -> Optional[dict[str, Any]]:
    """Lambda and beta of the run: taken from the trained meta-model, else resolved against ``data``."""
    if "lam" in report.metadata:
        return {"lambda": report.metadata["lam"], "beta": report.metadata["beta"]}
    if data is None:
        return None
    train_cfg = config.meta.train
    n_train = dataio.subsample_size(len(data.train), train_cfg.data_fraction)
    try:
        beta = train_cfg.elbo.resolved_beta(data.train.num_classes)
    except ValueError as exc:
        raise ConfigurationError(str(exc)) from exc
    return {"lambda": train_cfg.elbo.resolved_lambda(n_train), "beta": beta}


def _with_config(
    report: ExperimentReport,
    config: RunConfig,
    extra: Optional[dict[str, Any]] = None,
    data: Optional[LoadedData] = None,
) -> ExperimentReport:
    metadata = dict(report.metadata)
    metadata.update(extra or {})
    echoed = config.model_dump(mode="json", by_alias=True)
    elbo = _resolved_elbo(report, config, data)
    if elbo is not None:
        echoed["meta"]["train"]["elbo"] = elbo
    metadata["config"] = echoed
    return report.model_copy(update={"metadata": metadata})


def run_train_base(config: RunConfig) -> RunResult:
    data = load_data(config)
    spec = BaseModelSpec(
        input_dim=data.train.input_dim,
        hidden_widths=config.base.hidden_widths,
        num_classes=data.train.num_classes,
        tap_layers=config.base.tap_layers,
    )
    sgd = config.base.sgd.model_copy(update={"seed": config.seed})
    model, log = train_base(data.train, spec, sgd, test=data.test)
    report = ExperimentReport(
        task="train-base",
        seed=config.seed,
        accuracy=model.test_accuracy,
        ece=ece(model.predict_proba(data.test.inputs), data.test.labels),
        metadata={
            "train_accuracy": model.train_accuracy,
            "tap_dims": list(model.tap_dims),
            "base_checksum": model.checksum,
            "train_loss": log.train_loss,
            "epoch_accuracy": log.train_accuracy,
        },
    )
    outputs: dict[str, Writer] = {"base.puqb": lambda path: artifacts.save_base_model(path, model)}
    if config.export_cache:
        train_cache = build_feature_cache(model, data.train)
        test_cache = build_feature_cache(model, data.test)
        outputs["train.puqf"] = lambda path: dataio.write_feature_cache(path, train_cache)
        outputs["test.puqf"] = lambda path: dataio.write_feature_cache(path, test_cache)
    if config.export_csv:
        outputs["train.csv"] = lambda path: dataio.export_csv(data.train, path)
        outputs["test.csv"] = lambda path: dataio.export_csv(data.test, path)
    return RunResult(_with_config(report, config, data=data), outputs)


def run_train_meta(config: RunConfig) -> RunResult:
    data = load_data(config)
    featurizer = load_featurizer(config, data)
    spec = _meta_spec(config, featurizer)
    trained = train_meta(build_meta(spec, config.seed), featurizer, data.train, _meta_train_config(config))
    accuracy, calibration = evalharness.meta_accuracy(trained, featurizer, data.test)
    report = ExperimentReport(
        task="train-meta",
        seed=config.seed,
        accuracy=accuracy,
        ece=calibration,
        metadata=evalharness.training_metadata(trained),
    )
    extra = {"meta_checksum": numkernel.parameter_checksum(trained.model.parameters())}
    if isinstance(featurizer, FrozenBaseModel):
        extra["base_checksum"] = featurizer.checksum
    outputs: dict[str, Writer] = {"meta.puqm": lambda path: artifacts.save_meta_model(path, trained.model)}
    return RunResult(_with_config(report, config, extra), outputs)


def run_eval_ood(config: RunConfig) -> RunResult:
    data = load_data(config)
    featurizer = load_featurizer(config, data)
    meta = artifacts.load_meta_model(config.models.meta)
    _check_meta(meta, featurizer)
    report = evalharness.run_ood(
        meta,
        featurizer,
        data.test,
        load_ood(config, data),
        metrics=config.metrics,
        seed=config.seed,
        dump_alpha=config.dump_alpha,
    )
    return RunResult(_with_config(report, config, data=data))


def run_eval_misclass(config: RunConfig) -> RunResult:
    data = load_data(config)
    featurizer = load_featurizer(config, data)
    meta = artifacts.load_meta_model(config.models.meta)
    _check_meta(meta, featurizer)
    report = evalharness.run_misclassification(
        meta,
        featurizer,
        data.test,
        metrics=config.metrics,
        seed=config.seed,
        dump_alpha=config.dump_alpha,
    )
    return RunResult(_with_config(report, config, data=data))


def run_transfer_task(config: RunConfig) -> RunResult:
    target = dataio.read_feature_cache(config.data.train)
    target_test = dataio.read_feature_cache(config.data.test) if config.data.test else None
    ood = dataio.read_feature_cache(config.ood.path)
    spec = MetaModelSpec.for_mode(
        target.tap_dims, target.num_classes, config.meta.mode, logit_clamp=config.meta.logit_clamp
    )
    report = evalharness.run_transfer(
        target,
        spec,
        _meta_train_config(config),
        ood,
        target_test=target_test,
        metrics=config.metrics,
        seed=config.seed,
        dump_alpha=config.dump_alpha,
    )
    return RunResult(_with_config(report, config))


def run_ablate(config: RunConfig) -> RunResult:
    data = load_data(config)
    featurizer = load_featurizer(config, data)
    report = evalharness.run_ablation(
        config.ablation,
        featurizer,
        data.train,
        data.test,
        load_ood(config, data),
        _meta_train_config(config),
        metrics=config.metrics,
        seed=config.seed,
        logit_clamp=config.meta.logit_clamp,
        dump_alpha=config.dump_alpha,
    )
    return RunResult(_with_config(report, config))


EXECUTORS: dict[Task, Callable[[RunConfig], RunResult]] = {
    Task.TRAIN_BASE: run_train_base,
    Task.TRAIN_META: run_train_meta,
    Task.EVAL_OOD: run_eval_ood,
    Task.EVAL_MISCLASS: run_eval_misclass,
    Task.TRANSFER: run_transfer_task,
    Task.ABLATE: run_ablate,
}


def execute(config: RunConfig) -> Path:
    """Run ``config.task`` and write its artifacts and ``report.json``; return the report path."""
    result = EXECUTORS[config.task](config)
    output = Path(config.output)
    for name, writer in result.artifacts.items():
        writer(output / name)
    target = result.report.write(output / "report.json")
    logger.info("Wrote %s report to %s", result.report.task, target)
    return target
