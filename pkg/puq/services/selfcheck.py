"""Built-in numerical checks run by ``puq selfcheck``."""

import itertools
import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from puq.core.errors import NumericError
from puq.schemas.models import MetaModelSpec
from puq.services import dirichlet
from puq.services.dirichlet import ElboObjective, PriorParams
from puq.services.metamodel import MetaModel, build_meta, meta_forward_batch, meta_loss, meta_loss_and_grad
from puq.services.metrics import aupr_arrays, auroc_arrays

logger = logging.getLogger(__name__)

SPECIAL_TOLERANCE = 1e-9
RECURRENCE_TOLERANCE = 1e-11
GRADIENT_TOLERANCE = 1e-5
FD_STEP = 1e-5
KINK_MARGIN = 1e-3


@dataclass(frozen=True, slots=True)
class CheckResult:
    suite: str
    name: str
    passed: bool
    detail: str = ""


def _close(name: str, value: float, expected: float, tolerance: float) -> CheckResult:
    error = abs(value - expected)
    return CheckResult(
        "special-functions", name, error <= tolerance, f"got {value!r}, expected {expected!r}"
    )


def check_special_functions() -> list[CheckResult]:
    gamma = np.euler_gamma
    results = [
        _close("log_gamma(5) = ln 24", dirichlet.log_gamma(5.0), math.log(24.0), SPECIAL_TOLERANCE),
        _close("digamma(1) = -gamma", dirichlet.digamma(1.0), -gamma, SPECIAL_TOLERANCE),
        _close(
            "digamma(1/2) = -gamma - 2 ln 2",
            dirichlet.digamma(0.5),
            -gamma - 2.0 * math.log(2.0),
            SPECIAL_TOLERANCE,
        ),
        _close("trigamma(1) = pi^2/6", dirichlet.trigamma(1.0), math.pi**2 / 6.0, SPECIAL_TOLERANCE),
    ]

    # log_gamma error is scaled by max(1, |value|); it reaches ~8e4 on this grid
    recurrences: list[tuple[str, bool, Callable[[float], tuple[float, float, float]]]] = [
        (
            "log_gamma(x+1) - log_gamma(x) = ln x",
            True,
            lambda x: (dirichlet.log_gamma(x + 1), dirichlet.log_gamma(x), math.log(x)),
        ),
        (
            "digamma(x+1) - digamma(x) = 1/x",
            False,
            lambda x: (dirichlet.digamma(x + 1), dirichlet.digamma(x), 1.0 / x),
        ),
        (
            "trigamma(x) - trigamma(x+1) = 1/x^2",
            False,
            lambda x: (dirichlet.trigamma(x), dirichlet.trigamma(x + 1), 1.0 / x**2),
        ),
    ]
    grid = np.logspace(-2, 4, 61)
    for name, relative, terms in recurrences:
        worst = 0.0
        for x in grid:
            upper, lower, expected = terms(float(x))
            scale = max(1.0, abs(upper), abs(lower)) if relative else 1.0
            worst = max(worst, abs((upper - lower) - expected) / scale)
        results.append(
            CheckResult(
                "special-functions",
                name,
                worst <= RECURRENCE_TOLERANCE,
                f"worst {'scaled' if relative else 'absolute'} error {worst:.3e} over [1e-2, 1e4]",
            )
        )
    return results


def _pre_activation_margin(meta: MetaModel, taps: list[np.ndarray]) -> float:
    """Smallest distance of any pre-activation from a ReLU kink or of log-alpha from the clamp."""
    trace = meta_forward_batch(meta, taps)
    pre = [values for reducer in trace.reducer_traces for values in reducer.pre]
    margins = [float(np.abs(values).min()) for values in pre]
    margins.append(float((meta.spec.logit_clamp - np.abs(trace.raw)).min()))
    return min(margins)


def _gradient_instance(rng: np.random.Generator) -> tuple[MetaModel, list[np.ndarray]]:
    spec = MetaModelSpec(tap_dims=(8, 5), num_classes=3)
    meta = build_meta(spec, seed=int(rng.integers(2**31)))
    for layer in [layer for reducer in meta.reducers for layer in reducer.layers] + meta.combiner.layers:
        layer.bias[...] = rng.normal(scale=0.5, size=layer.bias.shape)
    for _ in range(100):
        taps = [rng.normal(scale=0.5, size=(4, dim)) for dim in spec.tap_dims]
        if _pre_activation_margin(meta, taps) > KINK_MARGIN:
            return meta, taps
    raise NumericError("could not draw taps away from the ReLU kinks")


def check_elbo_gradients(trials: int = 50, seed: int = 0) -> list[CheckResult]:
    """End-to-end ELBO gradients of a 2-tap, 3-class meta-model against central differences."""
    worst = 0.0
    for trial in range(trials):
        rng = np.random.default_rng([seed, trial])
        meta, taps = _gradient_instance(rng)
        labels = rng.integers(0, meta.spec.num_classes, size=4)
        objective = ElboObjective(
            lam=float(rng.uniform(0.0, 1.0)), prior=PriorParams(rng.uniform(0.5, 2.0, size=3))
        )
        _, grads = meta_loss_and_grad(meta, taps, labels, objective)
        analytic = np.concatenate([grad.ravel() for grad in grads])
        numeric = []
        for param in meta.parameters():
            flat = param.reshape(-1)
            for index in range(flat.size):
                original = flat[index]
                flat[index] = original + FD_STEP
                plus = meta_loss(meta, taps, labels, objective)
                flat[index] = original - FD_STEP
                minus = meta_loss(meta, taps, labels, objective)
                flat[index] = original
                numeric.append((plus - minus) / (2 * FD_STEP))
        numeric_grad = np.asarray(numeric)
        scale = max(np.linalg.norm(analytic) + np.linalg.norm(numeric_grad), 1e-12)
        worst = max(worst, float(np.linalg.norm(analytic - numeric_grad) / scale))
    return [
        CheckResult(
            "gradients",
            f"ELBO gradient vs finite differences ({trials} meta-models)",
            worst <= GRADIENT_TOLERANCE,
            f"worst relative error {worst:.3e}",
        )
    ]


def brute_force_auroc(scores: np.ndarray, labels: np.ndarray) -> float:
    positives = scores[labels]
    negatives = scores[~labels]
    credit = 0.0
    for pos, neg in itertools.product(positives, negatives):
        credit += 1.0 if pos > neg else 0.5 if pos == neg else 0.0
    return credit / (positives.size * negatives.size)


def brute_force_aupr(scores: np.ndarray, labels: np.ndarray) -> float:
    order = sorted(range(scores.size), key=lambda index: (-scores[index], index))
    hits = 0
    total = 0.0
    for rank, index in enumerate(order, start=1):
        if labels[index]:
            hits += 1
            total += hits / rank
    return total / int(labels.sum())


def check_ranking_oracles(trials: int = 1000, seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    auroc_failures = 0
    aupr_failures = 0
    checked = 0
    while checked < trials:
        n = int(rng.integers(2, 13))
        labels = rng.random(n) < 0.5
        if labels.all() or not labels.any():
            continue
        scores = rng.integers(0, 5, size=n).astype(np.float64) / 4.0
        checked += 1
        if auroc_arrays(scores, labels) != brute_force_auroc(scores, labels):
            auroc_failures += 1
        if not math.isclose(aupr_arrays(scores, labels), brute_force_aupr(scores, labels), rel_tol=1e-12):
            aupr_failures += 1
    return [
        CheckResult("ranking", "AUROC vs pairwise oracle", auroc_failures == 0, f"{auroc_failures} of {trials} differ"),
        CheckResult("ranking", "AUPR vs rank-walk oracle", aupr_failures == 0, f"{aupr_failures} of {trials} differ"),
    ]


def run_selfcheck(seed: int = 0) -> list[CheckResult]:
    results = check_special_functions() + check_elbo_gradients(seed=seed) + check_ranking_oracles(seed=seed)
    for result in results:
        log = logger.info if result.passed else logger.error
        log("[%s] %s: %s (%s)", result.suite, result.name, "ok" if result.passed else "FAILED", result.detail)
    return results
