"""Corruption generators used to build pseudo-OOD sets.

Image corruptions interpret each row as a ``(height, width)`` image; the
remaining ones work on any flat feature vector.
"""

import logging
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import correlate1d

from puq.core.errors import ConfigurationError, InputError, ShapeError
from puq.schemas.training import CorruptionConfig, CorruptionKind
from puq.services.dataio import Dataset

logger = logging.getLogger(__name__)

BLUR_RADIUS = 2


def gaussian_kernel(sigma: float, radius: int = BLUR_RADIUS) -> np.ndarray:
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    weights = np.exp(-0.5 * (offsets / sigma) ** 2)
    return weights / weights.sum()


def _blur(batch: np.ndarray, config: CorruptionConfig) -> np.ndarray:
    height, width = config.image_shape
    if batch.shape[1] != height * width:
        raise ShapeError(f"{batch.shape[1]} features cannot form a {height}x{width} image")
    images = batch.reshape(-1, height, width)
    kernel = gaussian_kernel(config.blur_sigma)
    blurred = correlate1d(images, kernel, axis=1, mode="nearest")
    blurred = correlate1d(blurred, kernel, axis=2, mode="nearest")
    return blurred.reshape(batch.shape)


def _contrast(batch: np.ndarray, config: CorruptionConfig) -> np.ndarray:
    means = batch.mean(axis=1, keepdims=True)
    rescaled = means + config.contrast_factor * (batch - means)
    return np.clip(rescaled, batch.min(), batch.max())


def _noise(
    batch: np.ndarray, config: CorruptionConfig, rng: np.random.Generator, feature_std: np.ndarray
) -> np.ndarray:
    scale = config.noise_scale * feature_std
    return batch + rng.normal(size=batch.shape) * scale


def corrupt(
    batch: np.ndarray,
    config: CorruptionConfig,
    kind: CorruptionKind,
    seed: int | Sequence[int],
    permutation: Optional[np.ndarray] = None,
    feature_std: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Apply one corruption to every row of ``batch``; deterministic given ``seed``.

    ``permutation`` overrides the seeded coordinate permutation. ``feature_std`` scales
    the additive noise and defaults to the per-feature spread of ``batch`` itself.
    """
    kind = CorruptionKind(kind)
    if kind not in config.enabled_kinds():
        raise ConfigurationError(f"corruption {kind.value} is not enabled")
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2:
        raise ShapeError(f"expected an (N, d) batch, got shape {batch.shape}")
    if batch.shape[0] == 0:
        return batch.copy()
    rng = np.random.default_rng(seed)

    if kind is CorruptionKind.PIXEL_PERMUTATION:
        if permutation is None:
            permutation = rng.permutation(batch.shape[1])
        permutation = np.asarray(permutation, dtype=np.int64)
        if not np.array_equal(np.sort(permutation), np.arange(batch.shape[1])):
            raise InputError("permutation must reorder every coordinate exactly once")
        return batch[:, permutation]
    if kind is CorruptionKind.GAUSSIAN_BLUR:
        if config.image_shape is None:
            raise ConfigurationError("gaussian blur requires image_shape")
        return _blur(batch, config)
    if kind is CorruptionKind.CONTRAST_RESCALE:
        return _contrast(batch, config)
    if feature_std is None:
        feature_std = batch.std(axis=0)
    feature_std = np.asarray(feature_std, dtype=np.float64)
    if feature_std.shape != (batch.shape[1],):
        raise ShapeError(f"feature_std has shape {feature_std.shape}, batch has {batch.shape[1]} features")
    return _noise(batch, config, rng, feature_std)


def corruption_assignment(
    n_samples: int, kinds: Sequence[CorruptionKind], seed: int | Sequence[int]
) -> list[np.ndarray]:
    """Seeded partition of sample indices into near-equal groups, one per kind."""
    order = np.random.default_rng(seed).permutation(n_samples)
    return [np.sort(group) for group in np.array_split(order, len(kinds))]


def make_noisy_validation(
    val: Dataset, corruption: CorruptionConfig, seed: int | Sequence[int]
) -> Dataset:
    """Corrupted copy of ``val`` split in equal parts across the enabled corruptions."""
    if len(val) == 0:
        raise InputError("validation set is empty")
    kinds = corruption.enabled_kinds()
    if not kinds:
        raise ConfigurationError("no corruption is enabled")
    base = [seed] if isinstance(seed, int) else list(seed)
    if corruption.image_shape is None and val.image_shape is not None:
        corruption = corruption.model_copy(update={"image_shape": val.image_shape})

    noisy = val.inputs.copy()
    feature_std = val.inputs.std(axis=0)
    groups = corruption_assignment(len(val), kinds, seed=[*base, 0])
    for index, (kind, group) in enumerate(zip(kinds, groups)):
        if group.size:
            noisy[group] = corrupt(
                val.inputs[group], corruption, kind, seed=[*base, index + 1], feature_std=feature_std
            )
    logger.debug(
        "Noisy validation: %s",
        ", ".join(f"{kind.value}={group.size}" for kind, group in zip(kinds, groups)),
    )
    return val.with_inputs(noisy, name=f"{val.name}-noisy")
