"""Closed-form Dirichlet quantities used by the meta-model objective and metrics.

Scalar operations take a :class:`DirichletParams`; the ``*_batch`` variants
operate row-wise on an ``(N, K)`` matrix of concentrations and back the
training loop and the scoring paths.
"""

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import special

from puq.core.errors import DomainError, InputError, NumericError, ShapeError

logger = logging.getLogger(__name__)


@dataclass(frozen=True, slots=True)
class DirichletParams:
    alpha: np.ndarray

    def __post_init__(self) -> None:
        alpha = np.asarray(self.alpha, dtype=np.float64).reshape(-1)
        if alpha.size < 1:
            raise InputError("a Dirichlet needs at least one concentration")
        if not np.all(alpha > 0):
            raise InputError("Dirichlet concentrations must be positive")
        if not np.isfinite(alpha.sum()):
            raise NumericError("Dirichlet precision is not finite")
        object.__setattr__(self, "alpha", alpha)

    @property
    def precision(self) -> float:
        return float(self.alpha.sum())

    @property
    def num_classes(self) -> int:
        return int(self.alpha.size)


@dataclass(frozen=True, slots=True)
class PriorParams:
    beta: np.ndarray

    def __post_init__(self) -> None:
        beta = np.asarray(self.beta, dtype=np.float64).reshape(-1)
        if not np.all(beta > 0):
            raise InputError("prior concentrations must be positive")
        object.__setattr__(self, "beta", beta)

    @classmethod
    def uniform(cls, num_classes: int) -> "PriorParams":
        return cls(np.ones(num_classes))


@dataclass(frozen=True, slots=True)
class ElboObjective:
    """Runtime form of the ELBO settings: KL weight and prior."""

    lam: float
    prior: PriorParams

    def __post_init__(self) -> None:
        if not (np.isfinite(self.lam) and self.lam >= 0):
            raise InputError("lambda must be finite and non-negative")


def _check_domain(x: float | np.ndarray, name: str) -> np.ndarray:
    values = np.asarray(x, dtype=np.float64)
    if not np.all(values > 0):
        raise DomainError(f"{name} is defined here for positive arguments only")
    return values


def log_gamma(x: float) -> float:
    return float(special.gammaln(_check_domain(x, "log_gamma")))


def digamma(x: float) -> float:
    return float(special.digamma(_check_domain(x, "digamma")))


def _trigamma_values(values: np.ndarray) -> np.ndarray:
    # arguments below 1 take one step of trigamma(x) = trigamma(x + 1) + 1/x^2
    small = values < 1.0
    shifted = np.where(small, values + 1.0, values)
    return special.polygamma(1, shifted) + np.where(small, 1.0 / values**2, 0.0)


def trigamma(x: float) -> float:
    return float(_trigamma_values(_check_domain(x, "trigamma")))


def expected_log_likelihood(params: DirichletParams, y: int) -> float:
    """E[log pi_y] under Dir(alpha): psi(alpha_y) - psi(alpha_0)."""
    if not 0 <= y < params.num_classes:
        raise InputError(f"class index {y} outside [0, {params.num_classes})")
    return float(special.digamma(params.alpha[y]) - special.digamma(params.precision))


def _kl_rows(alpha: np.ndarray, beta: np.ndarray) -> np.ndarray:
    alpha0 = alpha.sum(axis=1)
    beta0 = beta.sum(axis=-1)
    digamma_gap = special.digamma(alpha) - special.digamma(alpha0)[:, np.newaxis]
    return (
        special.gammaln(alpha0)
        - special.gammaln(alpha).sum(axis=1)
        - special.gammaln(beta0)
        + special.gammaln(beta).sum(axis=-1)
        + ((alpha - beta) * digamma_gap).sum(axis=1)
    )


def kl_dirichlet(p: DirichletParams, q: PriorParams) -> float:
    if p.alpha.shape != q.beta.shape:
        raise InputError(
            f"KL needs equal lengths, got {p.alpha.size} and {q.beta.size}"
        )
    return float(_kl_rows(p.alpha[np.newaxis, :], q.beta)[0])


def _check_alpha_batch(alpha: np.ndarray) -> None:
    finite = np.isfinite(alpha).all(axis=1) & (alpha > 0).all(axis=1)
    if not finite.all():
        index = int(np.flatnonzero(~finite)[0])
        raise NumericError(f"non-finite or non-positive concentration at sample {index}")


def elbo_loss_and_grad(
    log_alpha: np.ndarray, labels: np.ndarray, objective: ElboObjective
) -> tuple[float, np.ndarray]:
    """Negated per-sample ELBO averaged over the batch, with its gradient wrt log-alpha."""
    log_alpha = np.asarray(log_alpha, dtype=np.float64)
    targets = np.asarray(labels, dtype=np.int64).reshape(-1)
    n_samples, n_classes = log_alpha.shape
    if targets.shape[0] != n_samples:
        raise ShapeError(f"{targets.shape[0]} labels for {n_samples} rows")
    if n_samples and (targets.min() < 0 or targets.max() >= n_classes):
        raise InputError(f"labels must lie in [0, {n_classes})")
    beta = objective.prior.beta
    if beta.shape != (n_classes,):
        raise ShapeError(f"prior has {beta.size} classes, batch has {n_classes}")

    with np.errstate(over="ignore"):
        alpha = np.exp(log_alpha)
    _check_alpha_batch(alpha)
    alpha0 = alpha.sum(axis=1)
    rows = np.arange(n_samples)

    likelihood = special.digamma(alpha[rows, targets]) - special.digamma(alpha0)
    losses = -likelihood + objective.lam * _kl_rows(alpha, beta)

    trigamma_alpha = _trigamma_values(alpha)
    trigamma_alpha0 = _trigamma_values(alpha0)[:, np.newaxis]
    grad_alpha = np.broadcast_to(trigamma_alpha0, alpha.shape).copy()
    grad_alpha[rows, targets] -= trigamma_alpha[rows, targets]
    grad_alpha += objective.lam * (
        (alpha - beta) * trigamma_alpha - (alpha0 - beta.sum())[:, np.newaxis] * trigamma_alpha0
    )
    grad = grad_alpha * alpha / n_samples
    return float(losses.mean()), grad


def predictive_mean(params: DirichletParams) -> np.ndarray:
    return params.alpha / params.precision


def predictive_mean_batch(alpha: np.ndarray) -> np.ndarray:
    return alpha / alpha.sum(axis=1, keepdims=True)


def differential_entropy_batch(alpha: np.ndarray) -> np.ndarray:
    alpha0 = alpha.sum(axis=1)
    n_classes = alpha.shape[1]
    return (
        special.gammaln(alpha).sum(axis=1)
        - special.gammaln(alpha0)
        + (alpha0 - n_classes) * special.digamma(alpha0)
        - ((alpha - 1.0) * special.digamma(alpha)).sum(axis=1)
    )


def differential_entropy(params: DirichletParams) -> float:
    return float(differential_entropy_batch(params.alpha[np.newaxis, :])[0])


def expected_categorical_entropy_batch(alpha: np.ndarray) -> np.ndarray:
    alpha0 = alpha.sum(axis=1, keepdims=True)
    gap = special.digamma(alpha + 1.0) - special.digamma(alpha0 + 1.0)
    return -((alpha / alpha0) * gap).sum(axis=1)


def expected_categorical_entropy(params: DirichletParams) -> float:
    return float(expected_categorical_entropy_batch(params.alpha[np.newaxis, :])[0])


def sample_dirichlet(params: DirichletParams, n: int, seed: int | Sequence[int]) -> np.ndarray:
    """Draw ``n`` probability vectors as normalized Gamma(alpha_c, 1) variates."""
    if n < 1:
        raise InputError("sample count must be at least 1")
    rng = np.random.default_rng(seed)
    gammas = rng.standard_gamma(params.alpha, size=(n, params.num_classes))
    return gammas / gammas.sum(axis=1, keepdims=True)
