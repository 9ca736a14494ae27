import csv
import gzip
import math
import struct

import numpy as np
import pytest

from puq.core.errors import FormatError, InputError
from puq.schemas.data import GaussianMixtureConfig
from puq.services import dataio
from puq.services.dataio import Dataset, FeatureCache


def _labelled(n: int, num_classes: int = 2) -> Dataset:
    inputs = np.arange(n * 2, dtype=np.float64).reshape(n, 2)
    return Dataset(inputs, np.arange(n) % num_classes, num_classes=num_classes)


def test_gaussian_mixture_statistics(mixture_config):
    train, test = dataio.gen_gaussian_mixture(GaussianMixtureConfig(samples_per_class=2000), seed=1)
    full_inputs = np.concatenate([train.inputs, test.inputs])
    full_labels = np.concatenate([train.labels, test.labels])
    means = np.asarray(mixture_config.resolved_means())
    for label, mean in enumerate(means):
        members = full_inputs[full_labels == label]
        assert members.shape[0] == 2000
        np.testing.assert_allclose(members.mean(axis=0), mean, atol=0.1)
        np.testing.assert_allclose(members.std(axis=0), 1.0, atol=0.05)


def test_gaussian_mixture_split_is_balanced(synthetic_task):
    train, test, _ = synthetic_task
    assert len(train) == 360 and len(test) == 90
    assert np.bincount(train.labels).tolist() == [120, 120, 120]
    assert np.bincount(test.labels).tolist() == [30, 30, 30]


def test_gaussian_mixture_is_seeded(mixture_config):
    first, _ = dataio.gen_gaussian_mixture(mixture_config, seed=5)
    second, _ = dataio.gen_gaussian_mixture(mixture_config, seed=5)
    np.testing.assert_array_equal(first.inputs, second.inputs)


def test_default_ood_cluster_is_far_from_every_class(mixture_config):
    means = np.asarray(mixture_config.resolved_means())
    center = means.mean(axis=0) + np.asarray(mixture_config.resolved_shift())
    assert np.linalg.norm(means - center, axis=1).min() >= 8.0 * mixture_config.sigma
    ood = dataio.gen_ood_shifted(mixture_config, seed=2)
    assert ood.is_ood
    assert np.all(ood.labels == mixture_config.num_classes)
    np.testing.assert_allclose(ood.inputs.mean(axis=0), center, atol=0.35)


def test_mixture_config_rejects_mismatched_means():
    with pytest.raises(ValueError):
        GaussianMixtureConfig(num_classes=2, means=[[0.0, 0.0]])
    with pytest.raises(ValueError):
        GaussianMixtureConfig(num_classes=2, means=[[0.0, 0.0], [0.0, 0.0]])


def test_load_idx_scales_pixels(idx_writer):
    images = np.zeros((2, 3, 3), dtype=np.uint8)
    images[0, 0, 0] = 255
    images[1, 2, 2] = 51
    image_path, label_path = idx_writer("tiny", images, np.array([4, 9]))
    dataset = dataio.load_idx(image_path, label_path)
    assert dataset.inputs.shape == (2, 9)
    assert dataset.image_shape == (3, 3)
    assert dataset.inputs[0, 0] == 1.0
    assert dataset.inputs[1, 8] == pytest.approx(0.2)
    assert dataset.labels.tolist() == [4, 9]


def test_load_idx_reads_gzip(tmp_path, idx_writer):
    images = np.full((1, 2, 2), 255, dtype=np.uint8)
    image_path, label_path = idx_writer("gz", images, np.array([1]))
    packed = tmp_path / "gz-images.gz"
    packed.write_bytes(gzip.compress(image_path.read_bytes()))
    np.testing.assert_array_equal(dataio.load_idx(packed, label_path).inputs, np.ones((1, 4)))


def test_load_idx_rejects_bad_magic(idx_writer):
    image_path, label_path = idx_writer("bad", np.zeros((1, 2, 2)), np.array([0]))
    payload = bytearray(image_path.read_bytes())
    payload[3] = 0x01
    image_path.write_bytes(bytes(payload))
    with pytest.raises(FormatError) as info:
        dataio.load_idx(image_path, label_path)
    assert info.value.offset == 0


def test_load_idx_rejects_count_mismatch(idx_writer):
    image_path, _ = idx_writer("a", np.zeros((2, 2, 2)), np.array([0, 1]))
    _, label_path = idx_writer("b", np.zeros((3, 2, 2)), np.array([0, 1, 2]))
    with pytest.raises(FormatError, match="2 images but 3 labels"):
        dataio.load_idx(image_path, label_path)


def test_load_idx_rejects_truncated_pixels(idx_writer):
    image_path, label_path = idx_writer("short", np.zeros((2, 3, 3)), np.array([0, 1]))
    image_path.write_bytes(image_path.read_bytes()[:-4])
    with pytest.raises(FormatError):
        dataio.load_idx(image_path, label_path)


def test_load_idx_rejects_out_of_range_labels(idx_writer):
    image_path, label_path = idx_writer("labels", np.zeros((2, 2, 2)), np.array([0, 3]))
    with pytest.raises(FormatError) as info:
        dataio.load_idx(image_path, label_path, num_classes=3)
    assert info.value.offset == 9


def _cache() -> FeatureCache:
    rng = np.random.default_rng(7)
    return FeatureCache(
        tap_dims=(3, 2),
        num_classes=4,
        labels=np.array([0, 3, 2, 4]),
        features=[rng.normal(size=(4, 3)), rng.normal(size=(4, 2))],
    )


def test_feature_cache_round_trip(tmp_path):
    cache = _cache()
    path = dataio.write_feature_cache(tmp_path / "features.puqf", cache)
    loaded = dataio.read_feature_cache(path)
    assert loaded.tap_dims == (3, 2)
    assert loaded.num_classes == 4
    np.testing.assert_array_equal(loaded.labels, cache.labels)
    for original, restored in zip(cache.features, loaded.features):
        np.testing.assert_array_equal(original, restored)


def test_feature_cache_header_layout():
    payload = dataio.encode_feature_cache(_cache())
    assert payload[:4] == b"PUQF"
    assert struct.unpack_from("<IIIIII", payload, 4) == (1, 4, 2, 3, 2, 4)
    assert len(payload) == 28 + 4 * (4 + 5 * 4)


def test_feature_cache_rejects_truncation():
    payload = dataio.encode_feature_cache(_cache())
    with pytest.raises(FormatError, match="truncated"):
        dataio.decode_feature_cache(payload[:-1])
    with pytest.raises(FormatError):
        dataio.decode_feature_cache(payload[:10])


def test_feature_cache_rejects_bad_magic():
    payload = b"XXXX" + dataio.encode_feature_cache(_cache())[4:]
    with pytest.raises(FormatError) as info:
        dataio.decode_feature_cache(payload)
    assert info.value.offset == 0


def test_feature_cache_rejects_non_finite_values():
    payload = bytearray(dataio.encode_feature_cache(_cache()))
    struct.pack_into("<f", payload, 28 + 24 + 4, float("nan"))
    with pytest.raises(FormatError) as info:
        dataio.decode_feature_cache(bytes(payload))
    assert info.value.offset == 28 + 24


def test_feature_cache_to_dataset_marks_ood_rows():
    dataset = _cache().to_dataset(name="cached", is_ood=True)
    assert dataset.inputs.shape == (4, 5)
    assert dataset.is_ood


def test_split_sizes_and_disjointness():
    dataset = _labelled(10)
    first, second = dataio.split(dataset, (0.8, 0.2), seed=0)
    assert (len(first), len(second)) == (8, 2)
    rows = {tuple(row) for row in first.inputs} | {tuple(row) for row in second.inputs}
    assert len(rows) == 10


def test_split_is_stratified():
    dataset = _labelled(100, num_classes=4)
    first, second = dataio.split(dataset, (0.75, 0.25), seed=3)
    assert sorted(np.bincount(first.labels)) == [18, 19, 19, 19]
    assert max(np.bincount(second.labels)) - min(np.bincount(second.labels)) <= 1


def test_split_rejects_bad_fractions():
    with pytest.raises(InputError):
        dataio.split(_labelled(10), (0.8, 0.4), seed=0)
    with pytest.raises(InputError):
        dataio.split(_labelled(10), (0.95, 0.05), seed=0)


@pytest.mark.parametrize("fraction", [0.1, 0.25, 0.33])
def test_subsample_takes_ceiling(fraction):
    dataset = _labelled(37)
    assert len(dataio.subsample(dataset, fraction, seed=1)) == math.ceil(fraction * 37)


def test_dataset_validation():
    with pytest.raises(InputError):
        Dataset(np.zeros((2, 2)), np.array([0, 2]), num_classes=2)
    with pytest.raises(InputError):
        Dataset(np.array([[np.nan, 0.0]]), np.array([0]), num_classes=2)


def test_export_csv(tmp_path):
    dataset = Dataset(np.array([[0.5, -1.25]]), np.array([1]), num_classes=2)
    path = dataio.export_csv(dataset, tmp_path / "debug" / "rows.csv")
    with path.open(newline="", encoding="utf-8") as handle:
        rows = list(csv.DictReader(handle))
    assert rows == [{"x0": "0.5", "x1": "-1.25", "label": "1"}]


def test_export_csv_replaces_existing_file(tmp_path):
    target = tmp_path / "rows.csv"
    target.write_text("stale\n", encoding="utf-8")
    dataset = Dataset(np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]), np.array([0, 2]), num_classes=3)
    dataio.export_csv(dataset, target)
    with target.open(newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        assert reader.fieldnames == ["x0", "x1", "x2", "label"]
        assert [row["label"] for row in reader] == ["0", "2"]
    assert [path.name for path in tmp_path.iterdir()] == ["rows.csv"]


@pytest.mark.parametrize("n, fraction, expected", [(120, 0.1, 12), (7, 0.1, 1), (10, 1.0, 10), (3, 0.5, 2)])
def test_subsample_size_rounds_up(n, fraction, expected):
    assert dataio.subsample_size(n, fraction) == expected
