"""Dirichlet meta-model on top of frozen tap features.

Each tap ``j`` is reduced by its own stack ``g_j`` of halving FC+ReLU blocks
down to ``K`` meta-features; a linear combiner ``g_c`` maps the concatenated
meta-features to log-concentrations, clamped to ``[-logit_clamp, logit_clamp]``.
Single-tap modes (LinearMeta, LastLayer) replace the whole structure with one
linear map of the final tap.

Training standardizes the taps with statistics of the fit split; the returned
checkpoint has that scaling folded into the layers that read the taps, so it
consumes raw tap features.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Protocol, Sequence, runtime_checkable

import numpy as np

from puq.core.errors import (
    ConfigurationError,
    DegenerateMetricError,
    PuqError,
    ShapeError,
)
from puq.schemas.models import MetaMode, MetaModelSpec
from puq.schemas.training import MetaTrainConfig, StopMetric
from puq.services import dirichlet, numkernel
from puq.services.corruptions import make_noisy_validation
from puq.services.dataio import Dataset, split, subsample
from puq.services.dirichlet import ElboObjective, PriorParams
from puq.services.metrics import auroc_arrays, scored
from puq.services.numkernel import Activation, ActivationTrace, Mlp
from puq.services.uqmetrics import MetricKind, uncertainty_scores

logger = logging.getLogger(__name__)


class Featurizer(Protocol):
    """Anything that turns raw input rows into per-tap feature matrices."""

    @property
    def tap_dims(self) -> tuple[int, ...]: ...

    @property
    def num_classes(self) -> int: ...

    def taps(self, inputs: np.ndarray) -> list[np.ndarray]: ...


@runtime_checkable
class Checksummed(Protocol):
    def current_checksum(self) -> str: ...


@dataclass(frozen=True, slots=True)
class CacheFeaturizer:
    """Featurizer for cached taps: input rows are the concatenated tap vectors."""

    tap_dims: tuple[int, ...]
    num_classes: int

    def taps(self, inputs: np.ndarray) -> list[np.ndarray]:
        batch = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
        if batch.shape[1] != sum(self.tap_dims):
            raise ShapeError(
                f"cached rows have {batch.shape[1]} features, taps need {sum(self.tap_dims)}"
            )
        bounds = np.cumsum((0,) + tuple(self.tap_dims))
        return [batch[:, start:stop] for start, stop in zip(bounds[:-1], bounds[1:])]


@dataclass(slots=True)
class MetaTrace:
    reducer_traces: list[ActivationTrace]
    combiner_trace: ActivationTrace
    raw: np.ndarray
    log_alpha: np.ndarray


@dataclass(slots=True)
class MetaModel:
    spec: MetaModelSpec
    reducers: list[Mlp]
    combiner: Mlp

    def parameters(self) -> list[np.ndarray]:
        params: list[np.ndarray] = []
        for reducer in self.reducers:
            params.extend(reducer.parameters())
        params.extend(self.combiner.parameters())
        return params

    def copy(self) -> "MetaModel":
        return MetaModel(
            spec=self.spec,
            reducers=[reducer.copy() for reducer in self.reducers],
            combiner=self.combiner.copy(),
        )

    def log_alpha(self, taps: Sequence[np.ndarray]) -> np.ndarray:
        return meta_forward_batch(self, taps).log_alpha

    def alpha(self, taps: Sequence[np.ndarray]) -> np.ndarray:
        return np.exp(self.log_alpha(taps))


def reducer_widths(tap_dim: int, num_classes: int) -> list[int]:
    """Halve (rounding up) while the next width still exceeds ``num_classes``, then project."""
    if tap_dim < num_classes:
        raise ConfigurationError(
            f"tap dimension {tap_dim} is smaller than the class count {num_classes}"
        )
    widths = [tap_dim]
    while math.ceil(widths[-1] / 2) > num_classes:
        widths.append(math.ceil(widths[-1] / 2))
    widths.append(num_classes)
    return widths


def build_meta(spec: MetaModelSpec, seed: int) -> MetaModel:
    n_classes = spec.num_classes
    if spec.mode.single_tap:
        if spec.tap_dims[-1] < n_classes:
            raise ConfigurationError(
                f"tap dimension {spec.tap_dims[-1]} is smaller than the class count {n_classes}"
            )
        combiner = numkernel.build_mlp([spec.tap_dims[-1], n_classes], seed=[seed, 0])
        return MetaModel(spec=spec, reducers=[], combiner=combiner)
    reducers = [
        numkernel.build_mlp(
            reducer_widths(dim, n_classes), seed=[seed, 1, index], final_activation=Activation.RELU
        )
        for index, dim in enumerate(spec.tap_dims)
    ]
    combiner = numkernel.build_mlp([len(spec.tap_dims) * n_classes, n_classes], seed=[seed, 2])
    return MetaModel(spec=spec, reducers=reducers, combiner=combiner)


@dataclass(frozen=True, slots=True)
class TapScaling:
    """Per-feature standardization of the taps a meta-model reads."""

    shift: tuple[np.ndarray, ...]
    scale: tuple[np.ndarray, ...]

    @classmethod
    def fit(cls, taps: Sequence[np.ndarray]) -> "TapScaling":
        # constant features (dead units) are only centred
        shift = tuple(tap.mean(axis=0) for tap in taps)
        scale = tuple(np.where(std > 1e-8, std, 1.0) for std in (tap.std(axis=0) for tap in taps))
        return cls(shift, scale)

    def apply(self, taps: Sequence[np.ndarray]) -> list[np.ndarray]:
        return [(tap - shift) / scale for tap, shift, scale in zip(taps, self.shift, self.scale)]


def fold_tap_scaling(meta: MetaModel, scaling: TapScaling) -> None:
    """Absorb ``scaling`` into the first layer reading each tap, in place.

    Afterwards ``meta`` on raw taps computes what it computed on standardized ones.
    """
    if meta.spec.mode.single_tap:
        first_layers = [meta.combiner.layers[0]]
    else:
        first_layers = [reducer.layers[0] for reducer in meta.reducers]
    if len(first_layers) != len(scaling.scale):
        raise ShapeError(f"scaling covers {len(scaling.scale)} taps, meta-model reads {len(first_layers)}")
    for layer, shift, scale in zip(first_layers, scaling.shift, scaling.scale):
        layer.weights /= scale
        layer.bias -= layer.weights @ shift


def _select_taps(meta: MetaModel, taps: Sequence[np.ndarray]) -> list[np.ndarray]:
    if not taps:
        raise ShapeError("no tap features supplied")
    selected = list(taps[-1:]) if meta.spec.mode.single_tap else list(taps)
    if len(selected) != len(meta.spec.tap_dims):
        raise ShapeError(f"{len(selected)} taps supplied, meta-model expects {len(meta.spec.tap_dims)}")
    for index, (tap, dim) in enumerate(zip(selected, meta.spec.tap_dims)):
        if np.ndim(tap) != 2 or np.shape(tap)[1] != dim:
            raise ShapeError(f"tap {index} has shape {np.shape(tap)}, expected (N, {dim})")
    return selected


def meta_forward_batch(meta: MetaModel, taps: Sequence[np.ndarray]) -> MetaTrace:
    selected = _select_taps(meta, taps)
    if meta.spec.mode.single_tap:
        reducer_traces: list[ActivationTrace] = []
        combined = selected[0]
    else:
        reducer_traces = [
            numkernel.forward(reducer, tap) for reducer, tap in zip(meta.reducers, selected)
        ]
        combined = np.concatenate([trace.output for trace in reducer_traces], axis=1)
    combiner_trace = numkernel.forward(meta.combiner, combined)
    raw = combiner_trace.output
    clamp = meta.spec.logit_clamp
    return MetaTrace(reducer_traces, combiner_trace, raw, np.clip(raw, -clamp, clamp))


def meta_forward(meta: MetaModel, taps: Sequence[np.ndarray]) -> np.ndarray:
    """Log-concentrations for a single sample given its per-tap vectors."""
    batch = [np.asarray(tap, dtype=np.float64)[np.newaxis, :] for tap in taps]
    return meta_forward_batch(meta, batch).log_alpha[0]


def clamp_backward(raw: np.ndarray, output_grad: np.ndarray, clamp: float) -> np.ndarray:
    """Gradient through the log-alpha clamp.

    Identity inside the range. A saturated entry keeps its gradient only when a
    descent step moves it back toward the range.
    """
    inside = (raw > -clamp) & (raw < clamp)
    recovering = ((raw >= clamp) & (output_grad > 0)) | ((raw <= -clamp) & (output_grad < 0))
    return output_grad * (inside | recovering)


def meta_backward(meta: MetaModel, trace: MetaTrace, output_grad: np.ndarray) -> list[np.ndarray]:
    """Parameter gradients, ordered like ``meta.parameters()``."""
    combiner_grads, combined_grad = numkernel.backward(
        meta.combiner,
        trace.combiner_trace,
        clamp_backward(trace.raw, output_grad, meta.spec.logit_clamp),
    )
    grads: list[np.ndarray] = []
    n_classes = meta.spec.num_classes
    for index, (reducer, reducer_trace) in enumerate(zip(meta.reducers, trace.reducer_traces)):
        chunk = combined_grad[:, index * n_classes : (index + 1) * n_classes]
        reducer_grads, _ = numkernel.backward(reducer, reducer_trace, chunk)
        grads.extend(reducer_grads)
    grads.extend(combiner_grads)
    return grads


def mode_loss_and_grad(
    meta: MetaModel, log_alpha: np.ndarray, labels: np.ndarray, objective: ElboObjective
) -> tuple[float, np.ndarray]:
    if meta.spec.mode.uses_elbo:
        return dirichlet.elbo_loss_and_grad(log_alpha, labels, objective)
    return numkernel.softmax_cross_entropy(log_alpha, labels)


def meta_loss(
    meta: MetaModel, taps: Sequence[np.ndarray], labels: np.ndarray, objective: ElboObjective
) -> float:
    return mode_loss_and_grad(meta, meta.log_alpha(taps), labels, objective)[0]


def meta_loss_and_grad(
    meta: MetaModel, taps: Sequence[np.ndarray], labels: np.ndarray, objective: ElboObjective
) -> tuple[float, list[np.ndarray]]:
    trace = meta_forward_batch(meta, taps)
    loss, grad = mode_loss_and_grad(meta, trace.log_alpha, labels, objective)
    return loss, meta_backward(meta, trace, grad)


@dataclass(frozen=True, slots=True)
class EpochRecord:
    epoch: int
    train_loss: float
    stop_value: float


@dataclass(frozen=True)
class TrainedMeta:
    model: MetaModel
    history: tuple[EpochRecord, ...]
    stopped_epoch: int
    best_epoch: int
    initial_train_loss: float
    n_train_samples: int
    lam: float
    beta: tuple[float, ...]
    stop_metric: StopMetric
    ood_metric: Optional[MetricKind] = None

    @property
    def spec(self) -> MetaModelSpec:
        return self.model.spec

    @property
    def best_record(self) -> Optional[EpochRecord]:
        for record in self.history:
            if record.epoch == self.best_epoch:
                return record
        return None


@dataclass(slots=True)
class EarlyStopping:
    """Tracks the best epoch; ties keep the earliest epoch."""

    patience: int
    maximize: bool = True
    best_value: Optional[float] = None
    best_epoch: int = 0
    wait: int = 0

    def update(self, epoch: int, value: float) -> bool:
        """Record ``value``; return True when it is a new best."""
        improved = self.best_value is None or (
            value > self.best_value if self.maximize else value < self.best_value
        )
        if improved:
            self.best_value = value
            self.best_epoch = epoch
            self.wait = 0
        else:
            self.wait += 1
        return improved

    @property
    def should_stop(self) -> bool:
        return self.wait >= self.patience


@dataclass(slots=True)
class _ValidationTaps:
    taps: list[np.ndarray]
    labels: np.ndarray
    noisy_taps: Optional[list[np.ndarray]] = None


def ood_stop_kind(mode: MetaMode) -> MetricKind:
    return MetricKind.MUTUAL_INFORMATION if mode.uses_elbo else MetricKind.ENTROPY


def _stop_value(
    meta: MetaModel,
    metric: StopMetric,
    val: _ValidationTaps,
    objective: ElboObjective,
) -> float:
    if metric is StopMetric.VAL_LOSS:
        return meta_loss(meta, val.taps, val.labels, objective)
    alpha = meta.alpha(val.taps)
    if metric is StopMetric.OOD_AUROC:
        kind = ood_stop_kind(meta.spec.mode)
        clean = uncertainty_scores(alpha, kind)
        noisy = uncertainty_scores(meta.alpha(val.noisy_taps), kind)
        return auroc_arrays(*scored(clean, noisy))
    wrong = alpha.argmax(axis=1) != val.labels
    if not wrong.any() or wrong.all():
        raise DegenerateMetricError(
            "validation predictions are all correct (or all wrong), so MisclassAuroc is "
            "undefined; use stop_metric ValLoss instead"
        )
    scores = uncertainty_scores(alpha, MetricKind.MAX_PROB)
    return auroc_arrays(scores, wrong)


def train_meta(
    meta: MetaModel,
    featurizer: Featurizer,
    train: Dataset,
    cfg: MetaTrainConfig,
) -> TrainedMeta:
    """Fit ``meta`` on frozen features of ``train`` with validation-driven early stopping."""
    spec = meta.spec
    if train.num_classes != spec.num_classes or featurizer.num_classes != spec.num_classes:
        raise ShapeError(
            f"meta-model has {spec.num_classes} classes, data has {train.num_classes}"
        )
    seed = cfg.sgd.seed
    checksum = featurizer.current_checksum() if isinstance(featurizer, Checksummed) else None

    data = subsample(train, cfg.data_fraction, seed=[seed, 10])
    fit, val = split(data, (1.0 - cfg.val_fraction, cfg.val_fraction), seed=[seed, 11])
    raw_fit_taps = _select_taps(meta, featurizer.taps(fit.inputs))
    scaling = TapScaling.fit(raw_fit_taps)
    fit_taps = scaling.apply(raw_fit_taps)
    validation = _ValidationTaps(
        scaling.apply(_select_taps(meta, featurizer.taps(val.inputs))), val.labels
    )
    if cfg.stop_metric is StopMetric.OOD_AUROC:
        noisy = make_noisy_validation(val, cfg.corruption, seed=[seed, 12])
        validation.noisy_taps = scaling.apply(_select_taps(meta, featurizer.taps(noisy.inputs)))

    lam = cfg.elbo.resolved_lambda(len(data))
    beta = cfg.elbo.resolved_beta(spec.num_classes)
    objective = ElboObjective(lam=lam, prior=PriorParams(np.asarray(beta)))
    maximize = cfg.stop_metric is not StopMetric.VAL_LOSS
    stopper = EarlyStopping(patience=cfg.patience, maximize=maximize)

    initial_loss = meta_loss(meta, fit_taps, fit.labels, objective)
    logger.info(
        "Training %s meta-model on %s samples (%s fit / %s val), lambda=%g, initial loss=%.5f",
        spec.mode.value,
        len(data),
        len(fit),
        len(val),
        lam,
        initial_loss,
    )
    state = numkernel.MomentumState.zeros_like(meta.parameters())
    best = meta.copy()
    history: list[EpochRecord] = []
    stopped_epoch = 0
    for epoch in range(1, cfg.sgd.max_epochs + 1):
        for batch in numkernel.epoch_batches(len(fit), cfg.sgd.batch_size, seed, epoch):
            _, grads = meta_loss_and_grad(
                meta, [tap[batch] for tap in fit_taps], fit.labels[batch], objective
            )
            if cfg.max_grad_norm is not None:
                grads, norm = numkernel.clip_grad_norm(grads, cfg.max_grad_norm)
                logger.debug("Meta epoch %s batch gradient norm %.4g", epoch, norm)
            numkernel.sgd_step(meta, grads, state, cfg.sgd)
        train_loss = meta_loss(meta, fit_taps, fit.labels, objective)
        stop_value = _stop_value(meta, cfg.stop_metric, validation, objective)
        history.append(EpochRecord(epoch, train_loss, stop_value))
        stopped_epoch = epoch
        if stopper.update(epoch, stop_value):
            best = meta.copy()
        logger.info(
            "Meta epoch %s: train_loss=%.5f %s=%.5f (best epoch %s)",
            epoch,
            train_loss,
            cfg.stop_metric.value,
            stop_value,
            stopper.best_epoch,
        )
        if stopper.should_stop:
            logger.info("Early stopping after %s epochs without improvement", stopper.wait)
            break

    if checksum is not None and featurizer.current_checksum() != checksum:
        raise PuqError("base-model parameters changed during meta-model training")
    fold_tap_scaling(best, scaling)
    numkernel.freeze(best.parameters())
    return TrainedMeta(
        model=best,
        history=tuple(history),
        stopped_epoch=stopped_epoch,
        best_epoch=stopper.best_epoch,
        initial_train_loss=initial_loss,
        n_train_samples=len(data),
        lam=lam,
        beta=tuple(beta),
        stop_metric=cfg.stop_metric,
        ood_metric=ood_stop_kind(spec.mode) if cfg.stop_metric is StopMetric.OOD_AUROC else None,
    )
