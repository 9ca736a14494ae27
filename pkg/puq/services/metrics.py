"""Threshold-free ranking metrics and calibration error.

Positives are OOD or misclassified samples, negatives are in-distribution or
correctly classified ones; larger scores should rank positives first.
"""

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from puq.core.errors import DegenerateMetricError, InputError, NumericError


@dataclass(frozen=True, slots=True)
class ScoredSample:
    score: float
    label: bool

    def __post_init__(self) -> None:
        if not np.isfinite(self.score):
            raise NumericError("scored samples must have finite scores")


def _unpack(samples: Sequence[ScoredSample]) -> tuple[np.ndarray, np.ndarray]:
    scores = np.fromiter((sample.score for sample in samples), dtype=np.float64, count=len(samples))
    labels = np.fromiter((sample.label for sample in samples), dtype=bool, count=len(samples))
    return scores, labels


def scored(negatives: np.ndarray, positives: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Stack negative and positive scores into ``(scores, labels)`` arrays."""
    negatives = np.asarray(negatives, dtype=np.float64).reshape(-1)
    positives = np.asarray(positives, dtype=np.float64).reshape(-1)
    scores = np.concatenate([negatives, positives])
    labels = np.concatenate([np.zeros(negatives.size, bool), np.ones(positives.size, bool)])
    if not np.all(np.isfinite(scores)):
        raise NumericError("uncertainty scores must be finite")
    return scores, labels


def auroc_arrays(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mann-Whitney U / (n_pos * n_neg); tied pairs are credited one half."""
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    n_neg = int(labels.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise DegenerateMetricError(
            f"AUROC needs both classes, got {n_pos} positives and {n_neg} negatives"
        )
    ranks = rankdata(scores, method="average")
    u_statistic = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u_statistic / (n_pos * n_neg))


def aupr_arrays(scores: np.ndarray, labels: np.ndarray) -> float:
    """Non-interpolated average precision.

    Samples are walked in descending score order; ties keep input order
    (stable sort, secondary key = input index).
    """
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise DegenerateMetricError("AUPR needs at least one positive sample")
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    hits = labels[order]
    true_positives = np.cumsum(hits)
    precision = true_positives / np.arange(1, hits.size + 1)
    # sequential sum keeps the result independent of array length
    return float(np.cumsum(precision[hits])[-1] / n_pos)


def auroc(samples: Sequence[ScoredSample]) -> float:
    return auroc_arrays(*_unpack(samples))


def aupr(samples: Sequence[ScoredSample]) -> float:
    return aupr_arrays(*_unpack(samples))


def ece(probs: np.ndarray, labels: np.ndarray, bins: int = 15) -> float:
    """Expected calibration error over equal-width confidence bins ``(lo, hi]``."""
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != probs.shape[0]:
        raise InputError(f"{labels.shape[0]} labels for {probs.shape[0]} predictions")
    if bins < 1:
        raise InputError("ECE needs at least one bin")
    if probs.shape[0] == 0:
        return 0.0
    confidences = probs.max(axis=1)
    correct = (probs.argmax(axis=1) == labels).astype(np.float64)
    edges = np.linspace(0.0, 1.0, bins + 1)
    bin_index = np.digitize(confidences, edges[1:-1], right=True)
    total = 0.0
    for index in range(bins):
        in_bin = bin_index == index
        count = int(in_bin.sum())
        if count:
            gap = abs(correct[in_bin].mean() - confidences[in_bin].mean())
            total += count / probs.shape[0] * gap
    return float(total)
