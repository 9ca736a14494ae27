"""Application runners: OOD detection, misclassification detection, transfer and ablations.

Every runner scores in-distribution samples as negatives and OOD or
misclassified samples as positives, then reduces with AUROC and AUPR.
"""

import logging
from typing import Any, Optional, Sequence

import numpy as np

from puq.core.errors import ConfigurationError, DegenerateMetricError, FormatError, InputError
from puq.schemas.models import AblationMode, MetaModelSpec
from puq.schemas.report import ExperimentReport, MetricResult
from puq.schemas.training import MetaTrainConfig
from puq.services import dirichlet
from puq.services.basemodel import BaseUncertainty, FrozenBaseModel, probability_uncertainty
from puq.services.corruptions import corrupt
from puq.services.dataio import Dataset, FeatureCache, split
from puq.services.metamodel import (
    CacheFeaturizer,
    Featurizer,
    MetaModel,
    TrainedMeta,
    build_meta,
    train_meta,
)
from puq.services.metrics import ScoredSample, aupr, aupr_arrays, auroc, auroc_arrays, ece, scored
from puq.services.uqmetrics import (
    MISCLASS_DEFAULT_METRICS,
    OOD_DEFAULT_METRICS,
    MetricKind,
    dataset_alpha,
    uncertainty_scores,
)

__all__ = [
    "AblationMode",
    "ScoredSample",
    "auroc",
    "aupr",
    "ece",
    "corrupt",
    "run_ood",
    "run_misclassification",
    "run_transfer",
    "run_ablation",
]

logger = logging.getLogger(__name__)

TRANSFER_TEST_FRACTION = 0.2
TEN_PERCENT = 0.1


def _model_of(meta: TrainedMeta | MetaModel) -> MetaModel:
    return meta.model if isinstance(meta, TrainedMeta) else meta


def _result(kind: str, negatives: np.ndarray, positives: np.ndarray) -> MetricResult:
    scores, labels = scored(negatives, positives)
    return MetricResult(kind=kind, auroc=auroc_arrays(scores, labels), aupr=aupr_arrays(scores, labels))


def _resolve_metrics(
    metrics: Optional[Sequence[MetricKind | str]], default: Sequence[MetricKind]
) -> tuple[MetricKind, ...]:
    kinds = tuple(MetricKind(kind) for kind in (metrics or default))
    return tuple(dict.fromkeys(kinds))


def training_metadata(meta: TrainedMeta | MetaModel) -> dict[str, Any]:
    spec = _model_of(meta).spec
    info: dict[str, Any] = {
        "mode": spec.mode.value,
        "tap_dims": list(spec.tap_dims),
        "n_taps": len(spec.tap_dims),
        "logit_clamp": spec.logit_clamp,
    }
    if isinstance(meta, TrainedMeta):
        info.update(
            n_train_samples=meta.n_train_samples,
            lam=meta.lam,
            beta=list(meta.beta),
            stop_metric=meta.stop_metric.value,
            best_epoch=meta.best_epoch,
            stopped_epoch=meta.stopped_epoch,
            initial_train_loss=meta.initial_train_loss,
            history=[
                {"epoch": r.epoch, "train_loss": r.train_loss, "stop_value": r.stop_value}
                for r in meta.history
            ],
        )
    return info


def _accuracy_and_ece(alpha: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    probs = dirichlet.predictive_mean_batch(alpha)
    accuracy = float(np.mean(probs.argmax(axis=1) == labels))
    return accuracy, ece(probs, labels)


def meta_accuracy(
    meta: TrainedMeta | MetaModel, featurizer: Featurizer, test: Dataset
) -> tuple[float, float]:
    """Accuracy and ECE of the predictive mean on a labeled test set."""
    return _accuracy_and_ece(dataset_alpha(meta, featurizer, test.inputs), test.labels)


def run_ood(
    meta: TrainedMeta | MetaModel,
    featurizer: Featurizer,
    id_test: Dataset,
    ood_test: Dataset,
    metrics: Optional[Sequence[MetricKind | str]] = None,
    seed: int = 0,
    dump_alpha: bool = False,
    task: str = "eval-ood",
    metadata: Optional[dict[str, Any]] = None,
) -> ExperimentReport:
    """Separate ``id_test`` (negatives) from ``ood_test`` (positives) per metric."""
    if len(id_test) == 0 or len(ood_test) == 0:
        raise InputError("OOD evaluation needs non-empty ID and OOD test sets")
    if id_test.input_dim != ood_test.input_dim:
        raise InputError(
            f"ID inputs have {id_test.input_dim} features, OOD inputs have {ood_test.input_dim}"
        )
    kinds = _resolve_metrics(metrics, OOD_DEFAULT_METRICS)
    id_alpha = dataset_alpha(meta, featurizer, id_test.inputs)
    ood_alpha = dataset_alpha(meta, featurizer, ood_test.inputs)
    rows = [
        _result(kind.value, uncertainty_scores(id_alpha, kind), uncertainty_scores(ood_alpha, kind))
        for kind in kinds
    ]

    baseline: list[MetricResult] = []
    if isinstance(featurizer, FrozenBaseModel):
        id_probs = featurizer.predict_proba(id_test.inputs)
        ood_probs = featurizer.predict_proba(ood_test.inputs)
        for kind in BaseUncertainty:
            baseline.append(
                _result(
                    f"base:{kind.value}",
                    probability_uncertainty(id_probs, kind),
                    probability_uncertainty(ood_probs, kind),
                )
            )

    accuracy, calibration = _accuracy_and_ece(id_alpha, id_test.labels)
    info = training_metadata(meta)
    info.update(id_samples=len(id_test), ood_samples=len(ood_test), id_name=id_test.name, ood_name=ood_test.name)
    info.update(metadata or {})
    logger.info(
        "%s on %s vs %s: %s",
        task,
        id_test.name,
        ood_test.name,
        ", ".join(f"{row.kind} AUROC={row.auroc:.4f}" for row in rows),
    )
    return ExperimentReport(
        task=task,
        seed=seed,
        accuracy=accuracy,
        ece=calibration,
        metrics=rows,
        baseline=baseline,
        alpha_dump=id_alpha.tolist() if dump_alpha else None,
        metadata=info,
    )


def run_misclassification(
    meta: TrainedMeta | MetaModel,
    featurizer: Featurizer,
    test: Dataset,
    metrics: Optional[Sequence[MetricKind | str]] = None,
    seed: int = 0,
    dump_alpha: bool = False,
    task: str = "eval-misclass",
    metadata: Optional[dict[str, Any]] = None,
) -> ExperimentReport:
    """Rank misclassified test samples (positives) above correctly classified ones."""
    kinds = _resolve_metrics(metrics, MISCLASS_DEFAULT_METRICS)
    unsupported = [kind.value for kind in kinds if kind not in MISCLASS_DEFAULT_METRICS]
    if unsupported:
        raise ConfigurationError(
            f"misclassification detection uses total uncertainty only; unsupported: {unsupported}"
        )
    if test.is_ood:
        raise InputError(f"'{test.name}' is an OOD set and has no class labels")
    alpha = dataset_alpha(meta, featurizer, test.inputs)
    probs = dirichlet.predictive_mean_batch(alpha)
    wrong = probs.argmax(axis=1) != test.labels
    if not wrong.any():
        raise DegenerateMetricError(
            f"the meta-model classifies all {len(test)} samples of '{test.name}' correctly, "
            "so misclassification AUROC/AUPR are undefined"
        )
    rows = []
    for kind in kinds:
        scores = uncertainty_scores(alpha, kind)
        rows.append(_result(kind.value, scores[~wrong], scores[wrong]))

    baseline: list[MetricResult] = []
    if isinstance(featurizer, FrozenBaseModel):
        base_probs = featurizer.predict_proba(test.inputs)
        base_wrong = base_probs.argmax(axis=1) != test.labels
        if base_wrong.any() and not base_wrong.all():
            for kind in BaseUncertainty:
                scores = probability_uncertainty(base_probs, kind)
                baseline.append(_result(f"base:{kind.value}", scores[~base_wrong], scores[base_wrong]))
        else:
            logger.warning("Base model errors are degenerate on '%s'; skipping baseline rows", test.name)

    info = training_metadata(meta)
    info.update(test_samples=len(test), misclassified=int(wrong.sum()), test_name=test.name)
    info.update(metadata or {})
    logger.info(
        "%s on %s: %s misclassified, %s",
        task,
        test.name,
        int(wrong.sum()),
        ", ".join(f"{row.kind} AUROC={row.auroc:.4f}" for row in rows),
    )
    return ExperimentReport(
        task=task,
        seed=seed,
        accuracy=float(np.mean(~wrong)),
        ece=ece(probs, test.labels),
        metrics=rows,
        baseline=baseline,
        alpha_dump=alpha.tolist() if dump_alpha else None,
        metadata=info,
    )


def _check_cache_schema(spec: MetaModelSpec, target: FeatureCache, other: FeatureCache, what: str) -> None:
    if other.tap_dims != target.tap_dims or other.num_classes != target.num_classes:
        raise FormatError(
            f"{what} cache schema (taps {other.tap_dims}, K={other.num_classes}) does not match "
            f"the target cache (taps {target.tap_dims}, K={target.num_classes})"
        )
    expected = MetaModelSpec.for_mode(target.tap_dims, target.num_classes, spec.mode).tap_dims
    if spec.tap_dims != expected or spec.num_classes != target.num_classes:
        raise FormatError(
            f"meta spec (taps {spec.tap_dims}, K={spec.num_classes}) does not fit cache taps "
            f"{target.tap_dims} with K={target.num_classes}"
        )


def run_transfer(
    target_cache: FeatureCache,
    spec: MetaModelSpec,
    cfg: MetaTrainConfig,
    ood_cache: FeatureCache,
    target_test: Optional[FeatureCache] = None,
    metrics: Optional[Sequence[MetricKind | str]] = None,
    seed: int = 0,
    dump_alpha: bool = False,
    metadata: Optional[dict[str, Any]] = None,
) -> ExperimentReport:
    """Train a fresh meta-model on target-task source features and evaluate it.

    Without ``target_test`` the target cache is split 80/20 into train and test.
    """
    _check_cache_schema(spec, target_cache, ood_cache, "OOD")
    target = target_cache.to_dataset(name="target")
    if target_test is None:
        train, test = split(target, (1.0 - TRANSFER_TEST_FRACTION, TRANSFER_TEST_FRACTION), seed=[seed, 20])
    else:
        _check_cache_schema(spec, target_cache, target_test, "target test")
        train, test = target, target_test.to_dataset(name="target-test")
    featurizer = CacheFeaturizer(target_cache.tap_dims, target_cache.num_classes)
    trained = train_meta(build_meta(spec, seed), featurizer, train, cfg)
    info = {"train_samples": len(train)}
    info.update(metadata or {})
    return run_ood(
        trained,
        featurizer,
        test,
        ood_cache.to_dataset(name="transfer-ood", is_ood=True),
        metrics=metrics,
        seed=seed,
        dump_alpha=dump_alpha,
        task="transfer",
        metadata=info,
    )


def ablation_metrics(mode: AblationMode) -> tuple[MetricKind, ...]:
    if mode.meta_mode.uses_elbo:
        return tuple(MetricKind)
    return MISCLASS_DEFAULT_METRICS


def run_ablation(
    mode: AblationMode | str,
    featurizer: Featurizer,
    train: Dataset,
    id_test: Dataset,
    ood_test: Dataset,
    cfg: MetaTrainConfig,
    metrics: Optional[Sequence[MetricKind | str]] = None,
    seed: int = 0,
    logit_clamp: float = 15.0,
    dump_alpha: bool = False,
    metadata: Optional[dict[str, Any]] = None,
) -> ExperimentReport:
    """Train one meta-model variant and run the OOD pipeline on it."""
    mode = AblationMode(mode)
    spec = MetaModelSpec.for_mode(
        featurizer.tap_dims, featurizer.num_classes, mode.meta_mode, logit_clamp=logit_clamp
    )
    if mode is AblationMode.TEN_PERCENT_DATA:
        cfg = cfg.model_copy(update={"data_fraction": TEN_PERCENT})
    logger.info("Ablation %s: %s taps, data fraction %s", mode.value, len(spec.tap_dims), cfg.data_fraction)
    trained = train_meta(build_meta(spec, seed), featurizer, train, cfg)
    info: dict[str, Any] = {"ablation": mode.value, "data_fraction": cfg.data_fraction}
    info.update(metadata or {})
    return run_ood(
        trained,
        featurizer,
        id_test,
        ood_test,
        metrics=metrics or ablation_metrics(mode),
        seed=seed,
        dump_alpha=dump_alpha,
        task="ablate",
        metadata=info,
    )
