"""Datasets, generators, the IDX reader and the PUQF feature-cache format.

PUQF layout (little-endian)::

    [offset] [type]             [description]
    0        4 bytes            magic "PUQF"
    4        u32                version (1)
    8        u32                n_samples
    12       u32                n_taps
    16       u32[n_taps]        tap dimensions
    ..       u32                n_classes
    ..       records            n_samples x (u32 label, f32[sum(dims)] features)
"""

import csv
import gzip
import io
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Sequence

import numpy as np

from puq.core.errors import FormatError, InputError, ShapeError
from puq.core.files import atomic_write_bytes
from puq.schemas.data import GaussianMixtureConfig

logger = logging.getLogger(__name__)

CACHE_MAGIC = b"PUQF"
CACHE_VERSION = 1
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(slots=True)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = "dataset"
    image_shape: Optional[tuple[int, int]] = None
    is_ood: bool = False

    def __post_init__(self) -> None:
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.inputs.ndim != 2:
            raise ShapeError(f"inputs must be an (N, d) matrix, got shape {self.inputs.shape}")
        if self.inputs.shape[0] < 1:
            raise InputError(f"dataset '{self.name}' is empty")
        if self.labels.shape[0] != self.inputs.shape[0]:
            raise ShapeError(
                f"{self.labels.shape[0]} labels for {self.inputs.shape[0]} samples in '{self.name}'"
            )
        upper = self.num_classes + 1 if self.is_ood else self.num_classes
        if self.labels.min() < 0 or self.labels.max() >= upper:
            raise InputError(f"labels of '{self.name}' must lie in [0, {self.num_classes})")
        if not np.all(np.isfinite(self.inputs)):
            raise InputError(f"dataset '{self.name}' contains non-finite inputs")

    def __len__(self) -> int:
        return int(self.inputs.shape[0])

    @property
    def input_dim(self) -> int:
        return int(self.inputs.shape[1])

    def subset(self, indices: np.ndarray, name: Optional[str] = None) -> "Dataset":
        return Dataset(
            inputs=self.inputs[indices],
            labels=self.labels[indices],
            num_classes=self.num_classes,
            name=name or self.name,
            image_shape=self.image_shape,
            is_ood=self.is_ood,
        )

    def with_inputs(self, inputs: np.ndarray, name: str) -> "Dataset":
        return Dataset(
            inputs=inputs,
            labels=self.labels.copy(),
            num_classes=self.num_classes,
            name=name,
            image_shape=self.image_shape,
            is_ood=self.is_ood,
        )


@dataclass(slots=True)
class FeatureCache:
    tap_dims: tuple[int, ...]
    num_classes: int
    labels: np.ndarray
    features: list[np.ndarray]

    def __post_init__(self) -> None:
        self.tap_dims = tuple(int(dim) for dim in self.tap_dims)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.features = [np.asarray(tap, dtype=np.float32) for tap in self.features]
        if len(self.features) != len(self.tap_dims):
            raise FormatError(f"{len(self.features)} tap arrays for {len(self.tap_dims)} tap dims")
        for index, (tap, dim) in enumerate(zip(self.features, self.tap_dims)):
            if tap.shape != (self.labels.shape[0], dim):
                raise FormatError(
                    f"tap {index} has shape {tap.shape}, header says ({self.labels.shape[0]}, {dim})"
                )
            if not np.all(np.isfinite(tap)):
                raise FormatError(f"tap {index} contains non-finite feature values")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() > self.num_classes):
            raise FormatError(f"labels must lie in [0, {self.num_classes}]")

    @property
    def n_samples(self) -> int:
        return int(self.labels.shape[0])

    @property
    def n_taps(self) -> int:
        return len(self.tap_dims)

    def to_dataset(self, name: str = "feature-cache", is_ood: bool = False) -> Dataset:
        """Concatenate the taps into one input matrix (upcast to float64)."""
        inputs = np.concatenate([tap.astype(np.float64) for tap in self.features], axis=1)
        return Dataset(inputs, self.labels, self.num_classes, name=name, is_ood=is_ood)


def stratified_order(labels: np.ndarray, seed: int | Sequence[int]) -> np.ndarray:
    """Seeded ordering whose every prefix keeps the class proportions of ``labels``.

    Each sample is keyed by its (shuffled) rank within its class divided by the
    class size; ties between classes are broken randomly.
    """
    rng = np.random.default_rng(seed)
    keys = np.empty(labels.shape[0], dtype=np.float64)
    for label in np.unique(labels):
        members = np.flatnonzero(labels == label)
        shuffled = rng.permutation(members)
        keys[shuffled] = (np.arange(shuffled.size) + 0.5) / shuffled.size
    tiebreak = rng.random(labels.shape[0])
    return np.lexsort((tiebreak, keys))


def split(dataset: Dataset, fractions: Sequence[float], seed: int | Sequence[int]) -> list[Dataset]:
    """Disjoint stratified partition; the remainder goes to the first split."""
    if not fractions or any(fraction <= 0 for fraction in fractions):
        raise InputError("split fractions must be positive")
    total = float(sum(fractions))
    if total > 1.0 + 1e-9:
        raise InputError(f"split fractions sum to {total:.6f} > 1")
    n_samples = len(dataset)
    sizes = [math.floor(fraction * n_samples + 1e-9) for fraction in fractions]
    if math.isclose(total, 1.0):
        sizes[0] += n_samples - sum(sizes)
    order = stratified_order(dataset.labels, seed)
    parts: list[Dataset] = []
    start = 0
    for index, size in enumerate(sizes):
        if size < 1:
            raise InputError(f"split {index} would be empty for {n_samples} samples")
        indices = np.sort(order[start : start + size])
        parts.append(dataset.subset(indices, name=f"{dataset.name}[{index}]"))
        start += size
    return parts


def subsample_size(n_samples: int, fraction: float) -> int:
    if not 0 < fraction <= 1:
        raise InputError("fraction must lie in (0, 1]")
    return min(n_samples, math.ceil(fraction * n_samples - 1e-9))


def subsample(dataset: Dataset, fraction: float, seed: int | Sequence[int]) -> Dataset:
    """Stratified subsample of exactly ceil(fraction * N) samples."""
    count = subsample_size(len(dataset), fraction)
    if count >= len(dataset):
        return dataset
    indices = np.sort(stratified_order(dataset.labels, seed)[:count])
    return dataset.subset(indices, name=f"{dataset.name}[{fraction:g}]")


def gen_gaussian_mixture(cfg: GaussianMixtureConfig, seed: int) -> tuple[Dataset, Dataset]:
    rng = np.random.default_rng([seed, 0])
    means = np.asarray(cfg.resolved_means(), dtype=np.float64)
    inputs = []
    labels = []
    for label, mean in enumerate(means):
        inputs.append(rng.normal(mean, cfg.sigma, size=(cfg.samples_per_class, mean.size)))
        labels.append(np.full(cfg.samples_per_class, label))
    full = Dataset(
        np.concatenate(inputs),
        np.concatenate(labels),
        num_classes=cfg.num_classes,
        name="gaussian-mixture",
    )
    train, test = split(full, (0.8, 0.2), seed=[seed, 1])
    logger.info(
        "Generated Gaussian mixture: %s train / %s test samples, %s classes",
        len(train),
        len(test),
        cfg.num_classes,
    )
    return (
        train.subset(np.arange(len(train)), name="gaussian-mixture-train"),
        test.subset(np.arange(len(test)), name="gaussian-mixture-test"),
    )


def gen_ood_shifted(cfg: GaussianMixtureConfig, seed: int) -> Dataset:
    rng = np.random.default_rng([seed, 2])
    means = np.asarray(cfg.resolved_means(), dtype=np.float64)
    center = means.mean(axis=0) + np.asarray(cfg.resolved_shift(), dtype=np.float64)
    count = cfg.ood_samples or cfg.samples_per_class
    inputs = rng.normal(center, cfg.sigma, size=(count, center.size))
    return Dataset(
        inputs,
        np.full(count, cfg.num_classes),
        num_classes=cfg.num_classes,
        name="gaussian-ood",
        is_ood=True,
    )


def _read_bytes(path: str | Path) -> bytes:
    source = Path(path)
    try:
        if source.suffix == ".gz":
            with gzip.open(source, "rb") as handle:
                return handle.read()
        return source.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {source}: {exc}") from exc


def _unpack(fmt: str, payload: bytes, offset: int, what: str) -> tuple[Any, ...]:
    size = struct.calcsize(fmt)
    if len(payload) < offset + size:
        raise FormatError(f"truncated {what}", offset=len(payload))
    return struct.unpack_from(fmt, payload, offset)


def load_idx(
    images_path: str | Path,
    labels_path: str | Path,
    num_classes: int = 10,
    name: Optional[str] = None,
) -> Dataset:
    """Read an IDX image/label pair (optionally gzipped), pixels scaled to [0, 1]."""
    images = _read_bytes(images_path)
    labels = _read_bytes(labels_path)

    magic, n_images, n_rows, n_cols = _unpack(">IIII", images, 0, "IDX image header")
    if magic != IDX_IMAGES_MAGIC:
        raise FormatError(f"bad IDX image magic 0x{magic:08x} in {images_path}", offset=0)
    pixel_count = n_images * n_rows * n_cols
    if len(images) < 16 + pixel_count:
        raise FormatError(
            f"IDX image payload holds {len(images) - 16} bytes, expected {pixel_count}",
            offset=len(images),
        )

    magic, n_labels = _unpack(">II", labels, 0, "IDX label header")
    if magic != IDX_LABELS_MAGIC:
        raise FormatError(f"bad IDX label magic 0x{magic:08x} in {labels_path}", offset=0)
    if n_labels != n_images:
        raise FormatError(f"{n_images} images but {n_labels} labels", offset=4)
    if len(labels) < 8 + n_labels:
        raise FormatError("truncated IDX label payload", offset=len(labels))

    pixels = np.frombuffer(images, dtype=np.uint8, count=pixel_count, offset=16)
    targets = np.frombuffer(labels, dtype=np.uint8, count=n_labels, offset=8).astype(np.int64)
    if targets.size and targets.max() >= num_classes:
        bad = int(np.flatnonzero(targets >= num_classes)[0])
        raise FormatError(f"label {targets[bad]} outside [0, {num_classes})", offset=8 + bad)
    inputs = pixels.reshape(n_images, n_rows * n_cols).astype(np.float64) / 255.0
    logger.info("Loaded %s IDX images of %sx%s from %s", n_images, n_rows, n_cols, images_path)
    return Dataset(
        inputs,
        targets,
        num_classes=num_classes,
        name=name or Path(images_path).name,
        image_shape=(n_rows, n_cols),
    )


def _record_dtype(total_dim: int) -> np.dtype:
    return np.dtype([("label", "<u4"), ("features", "<f4", (total_dim,))])


def encode_feature_cache(cache: FeatureCache) -> bytes:
    header = struct.pack("<4sIII", CACHE_MAGIC, CACHE_VERSION, cache.n_samples, cache.n_taps)
    header += struct.pack(f"<{cache.n_taps}I", *cache.tap_dims)
    header += struct.pack("<I", cache.num_classes)
    records = np.empty(cache.n_samples, dtype=_record_dtype(sum(cache.tap_dims)))
    records["label"] = cache.labels
    records["features"] = np.concatenate(cache.features, axis=1)
    return header + records.tobytes()


def decode_feature_cache(payload: bytes) -> FeatureCache:
    magic, version, n_samples, n_taps = _unpack("<4sIII", payload, 0, "feature-cache header")
    if magic != CACHE_MAGIC:
        raise FormatError(f"bad feature-cache magic {magic!r}", offset=0)
    if version != CACHE_VERSION:
        raise FormatError(f"unsupported feature-cache version {version}", offset=4)
    if n_taps < 1:
        raise FormatError("feature cache declares no taps", offset=12)
    tap_dims = _unpack(f"<{n_taps}I", payload, 16, "feature-cache tap dims")
    offset = 16 + 4 * n_taps
    (num_classes,) = _unpack("<I", payload, offset, "feature-cache class count")
    offset += 4
    dtype = _record_dtype(sum(tap_dims))
    expected = offset + n_samples * dtype.itemsize
    if len(payload) < expected:
        raise FormatError(
            f"truncated feature-cache body: {len(payload)} of {expected} bytes",
            offset=len(payload),
        )
    records = np.frombuffer(payload, dtype=dtype, count=n_samples, offset=offset)
    features = records["features"]
    finite = np.isfinite(features).all(axis=1)
    if not finite.all():
        bad = int(np.flatnonzero(~finite)[0])
        raise FormatError("non-finite feature value", offset=offset + bad * dtype.itemsize)
    labels = records["label"].astype(np.int64)
    if labels.size and labels.max() > num_classes:
        bad = int(np.flatnonzero(labels > num_classes)[0])
        raise FormatError(f"label {labels[bad]} outside the header schema", offset=offset + bad * dtype.itemsize)
    bounds = np.cumsum((0,) + tuple(tap_dims))
    taps = [features[:, start:stop].copy() for start, stop in zip(bounds[:-1], bounds[1:])]
    return FeatureCache(tuple(tap_dims), int(num_classes), labels, taps)


def write_feature_cache(path: str | Path, cache: FeatureCache) -> Path:
    target = atomic_write_bytes(path, encode_feature_cache(cache))
    logger.info("Wrote feature cache with %s samples to %s", cache.n_samples, target)
    return target


def read_feature_cache(path: str | Path) -> FeatureCache:
    return decode_feature_cache(_read_bytes(path))


def export_csv(dataset: Dataset, path: str | Path) -> Path:
    """Debug export: one real64 column per feature (``x0`` ...), label last."""
    headers = [f"x{index}" for index in range(dataset.input_dim)] + ["label"]
    buffer = io.StringIO(newline="")
    writer = csv.DictWriter(buffer, fieldnames=headers)
    writer.writeheader()
    for values, label in zip(dataset.inputs, dataset.labels):
        row: Dict[str, Any] = {header: repr(float(value)) for header, value in zip(headers, values)}
        row["label"] = int(label)
        writer.writerow(row)
    target = atomic_write_bytes(path, buffer.getvalue().encode("utf-8"))
    logger.info("Wrote %s rows of %s to %s", len(dataset), dataset.name, target)
    return target

