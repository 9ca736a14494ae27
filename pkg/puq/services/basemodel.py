"""Train, freeze and tap the feed-forward base classifier."""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np
from scipy.special import entr, softmax

from puq.core.errors import InputError, ShapeError
from puq.schemas.models import BaseModelSpec
from puq.schemas.training import SgdConfig
from puq.services import numkernel
from puq.services.dataio import Dataset, FeatureCache
from puq.services.numkernel import Activation, Mlp

logger = logging.getLogger(__name__)


class BaseUncertainty(str, Enum):
    ENTROPY = "Entropy"
    MAX_PROB = "MaxProb"


@dataclass(slots=True)
class FrozenBaseModel:
    net: Mlp
    spec: BaseModelSpec
    train_accuracy: float = 0.0
    test_accuracy: float = 0.0
    checksum: str = ""

    def __post_init__(self) -> None:
        expected = [self.spec.input_dim, *self.spec.hidden_widths, self.spec.num_classes]
        if self.net.widths != expected:
            raise ShapeError(f"network widths {self.net.widths} do not match spec {expected}")
        numkernel.freeze(self.net.parameters())
        self.checksum = numkernel.parameter_checksum(self.net.parameters())

    @property
    def tap_dims(self) -> tuple[int, ...]:
        return self.spec.tap_dims

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    def current_checksum(self) -> str:
        return numkernel.parameter_checksum(self.net.parameters())

    def taps(self, inputs: np.ndarray) -> list[np.ndarray]:
        return extract_taps_batch(self, inputs)

    def predict_proba(self, inputs: np.ndarray) -> np.ndarray:
        return base_predict_batch(self, inputs)


@dataclass(slots=True)
class TrainingLog:
    train_accuracy: list[float] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)


def build_base_net(spec: BaseModelSpec, seed: int) -> Mlp:
    widths = [spec.input_dim, *spec.hidden_widths, spec.num_classes]
    return numkernel.build_mlp(widths, seed=[seed], final_activation=Activation.IDENTITY)


def _accuracy(net: Mlp, dataset: Dataset) -> float:
    logits = numkernel.forward(net, dataset.inputs).output
    return float(np.mean(np.argmax(logits, axis=1) == dataset.labels))


def train_base(
    dataset: Dataset,
    spec: BaseModelSpec,
    sgd: SgdConfig,
    test: Optional[Dataset] = None,
) -> tuple[FrozenBaseModel, TrainingLog]:
    if dataset.is_ood:
        raise InputError("the base model must be trained on labeled in-distribution data")
    if dataset.input_dim != spec.input_dim:
        raise ShapeError(f"dataset has {dataset.input_dim} features, spec expects {spec.input_dim}")
    if dataset.num_classes != spec.num_classes:
        raise InputError(
            f"dataset has {dataset.num_classes} classes, spec expects {spec.num_classes}"
        )

    net = build_base_net(spec, sgd.seed)
    state = numkernel.MomentumState.zeros_like(net.parameters())
    log = TrainingLog()
    for epoch in range(sgd.max_epochs):
        losses = []
        for batch in numkernel.epoch_batches(len(dataset), sgd.batch_size, sgd.seed, epoch):
            trace = numkernel.forward(net, dataset.inputs[batch])
            loss, grad = numkernel.softmax_cross_entropy(trace.output, dataset.labels[batch])
            grads, _ = numkernel.backward(net, trace, grad)
            numkernel.sgd_step(net, grads, state, sgd)
            losses.append(loss * batch.size)
        accuracy = _accuracy(net, dataset)
        log.train_loss.append(float(np.sum(losses) / len(dataset)))
        log.train_accuracy.append(accuracy)
        logger.info(
            "Base epoch %s/%s: loss=%.5f train_acc=%.4f",
            epoch + 1,
            sgd.max_epochs,
            log.train_loss[-1],
            accuracy,
        )

    model = FrozenBaseModel(
        net=net,
        spec=spec,
        train_accuracy=_accuracy(net, dataset),
        test_accuracy=_accuracy(net, test) if test is not None else 0.0,
    )
    logger.info(
        "Froze base model (train_acc=%.4f, test_acc=%.4f, checksum=%s)",
        model.train_accuracy,
        model.test_accuracy,
        model.checksum[:12],
    )
    return model, log


def _check_inputs(model: FrozenBaseModel, inputs: np.ndarray) -> np.ndarray:
    batch = np.asarray(inputs, dtype=np.float64)
    if batch.ndim == 1:
        batch = batch[np.newaxis, :]
    if batch.shape[1] != model.spec.input_dim:
        raise ShapeError(
            f"input has {batch.shape[1]} features, base model expects {model.spec.input_dim}"
        )
    return batch


def extract_taps_batch(model: FrozenBaseModel, inputs: np.ndarray) -> list[np.ndarray]:
    """Post-activation outputs of the tapped hidden layers, one ``(N, d_j)`` matrix per tap."""
    hidden = model.net.layers[: max(model.spec.tap_layers) + 1]
    trace = numkernel.forward(Mlp(hidden), _check_inputs(model, inputs))
    return [trace.post[index] for index in model.spec.tap_layers]


def extract_taps(model: FrozenBaseModel, x: np.ndarray) -> list[np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"extract_taps expects a single feature vector, got shape {x.shape}")
    return [tap[0] for tap in extract_taps_batch(model, x)]


def base_logits(model: FrozenBaseModel, inputs: np.ndarray) -> np.ndarray:
    return numkernel.forward(model.net, _check_inputs(model, inputs)).output


def base_predict_batch(model: FrozenBaseModel, inputs: np.ndarray) -> np.ndarray:
    return softmax(base_logits(model, inputs), axis=1)


def base_predict(model: FrozenBaseModel, x: np.ndarray) -> np.ndarray:
    return base_predict_batch(model, x)[0]


def probability_uncertainty(probs: np.ndarray, kind: BaseUncertainty) -> np.ndarray:
    """Row-wise Shannon entropy (nats) or 1 - max probability."""
    probs = np.atleast_2d(probs)
    if BaseUncertainty(kind) is BaseUncertainty.ENTROPY:
        return entr(probs).sum(axis=1)
    return 1.0 - probs.max(axis=1)


def base_uncertainty(model: FrozenBaseModel, x: np.ndarray, kind: BaseUncertainty) -> float:
    return float(probability_uncertainty(base_predict(model, x), kind)[0])


def build_feature_cache(model: FrozenBaseModel, dataset: Dataset) -> FeatureCache:
    taps = extract_taps_batch(model, dataset.inputs)
    return FeatureCache(model.tap_dims, model.num_classes, dataset.labels.copy(), taps)
