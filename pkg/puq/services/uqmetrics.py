"""Uncertainty scores derived from a Dirichlet output.

Every score is oriented so that a larger value means more uncertainty:
MaxProb is reported as ``1 - max p`` and Precision as ``-alpha_0``.
"""

from collections.abc import Iterable
from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING, Callable, Dict, Sequence

import numpy as np
from scipy.special import entr

from puq.services import dirichlet
from puq.services.dirichlet import DirichletParams
from puq.services.pipeline import map_chunks

if TYPE_CHECKING:
    from puq.services.metamodel import Featurizer, MetaModel, TrainedMeta


class MetricKind(str, Enum):
    ENTROPY = "Entropy"
    MAX_PROB = "MaxProb"
    DIFFERENTIAL_ENTROPY = "DifferentialEntropy"
    MUTUAL_INFORMATION = "MutualInformation"
    PRECISION = "Precision"


class MetricCategory(str, Enum):
    TOTAL = "Total"
    EPISTEMIC = "Epistemic"


def _entropy(alpha: np.ndarray) -> np.ndarray:
    return entr(dirichlet.predictive_mean_batch(alpha)).sum(axis=1)


def _max_prob(alpha: np.ndarray) -> np.ndarray:
    return 1.0 - dirichlet.predictive_mean_batch(alpha).max(axis=1)


def _mutual_information(alpha: np.ndarray) -> np.ndarray:
    return _entropy(alpha) - dirichlet.expected_categorical_entropy_batch(alpha)


def _precision(alpha: np.ndarray) -> np.ndarray:
    return -alpha.sum(axis=1)


@dataclass(frozen=True)
class MetricDefinition:
    label: str
    category: MetricCategory
    calculator: Callable[[np.ndarray], np.ndarray]


METRIC_MAP: Dict[MetricKind, MetricDefinition] = {
    MetricKind.ENTROPY: MetricDefinition(
        label="Ent", category=MetricCategory.TOTAL, calculator=_entropy
    ),
    MetricKind.MAX_PROB: MetricDefinition(
        label="MaxP", category=MetricCategory.TOTAL, calculator=_max_prob
    ),
    MetricKind.DIFFERENTIAL_ENTROPY: MetricDefinition(
        label="Dent",
        category=MetricCategory.EPISTEMIC,
        calculator=dirichlet.differential_entropy_batch,
    ),
    MetricKind.MUTUAL_INFORMATION: MetricDefinition(
        label="MI", category=MetricCategory.EPISTEMIC, calculator=_mutual_information
    ),
    MetricKind.PRECISION: MetricDefinition(
        label="Prec", category=MetricCategory.EPISTEMIC, calculator=_precision
    ),
}

OOD_DEFAULT_METRICS: tuple[MetricKind, ...] = (
    MetricKind.DIFFERENTIAL_ENTROPY,
    MetricKind.MUTUAL_INFORMATION,
    MetricKind.PRECISION,
)
MISCLASS_DEFAULT_METRICS: tuple[MetricKind, ...] = (MetricKind.ENTROPY, MetricKind.MAX_PROB)


def available_metrics() -> Iterable[tuple[MetricKind, MetricDefinition]]:
    return METRIC_MAP.items()


def metrics_in(category: MetricCategory) -> tuple[MetricKind, ...]:
    return tuple(kind for kind, metric in METRIC_MAP.items() if metric.category is category)


def uncertainty_scores(alpha: np.ndarray, kind: MetricKind) -> np.ndarray:
    """Row-wise score for an ``(N, K)`` matrix of concentrations."""
    alpha = np.atleast_2d(np.asarray(alpha, dtype=np.float64))
    return METRIC_MAP[MetricKind(kind)].calculator(alpha)


def uncertainty_score(params: DirichletParams, kind: MetricKind) -> float:
    return float(uncertainty_scores(params.alpha[np.newaxis, :], kind)[0])


def dataset_alpha(
    meta: "TrainedMeta | MetaModel", featurizer: "Featurizer", samples: np.ndarray
) -> np.ndarray:
    """Concentrations for every input row, computed chunk-wise on worker threads."""
    samples = np.asarray(samples, dtype=np.float64)
    model = getattr(meta, "model", meta)
    if samples.shape[0] == 0:
        return np.empty((0, model.spec.num_classes), dtype=np.float64)
    return map_chunks(lambda chunk: model.alpha(featurizer.taps(chunk)), np.atleast_2d(samples))


def score_dataset(
    meta: "TrainedMeta | MetaModel",
    featurizer: "Featurizer",
    samples: np.ndarray,
    kind: MetricKind,
) -> np.ndarray:
    """One score per input row, in input order."""
    return uncertainty_scores(dataset_alpha(meta, featurizer, samples), kind)


def score_panel(alpha: np.ndarray, kinds: Sequence[MetricKind]) -> dict[MetricKind, np.ndarray]:
    return {MetricKind(kind): uncertainty_scores(alpha, kind) for kind in kinds}
