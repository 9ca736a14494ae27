"""Desk-scale training experiments; run with ``pytest -m experiment``."""

import statistics
from pathlib import Path

import numpy as np
import pytest

from puq.core.config import settings
from puq.schemas.data import GaussianMixtureConfig
from puq.schemas.models import AblationMode, BaseModelSpec, MetaMode, MetaModelSpec
from puq.schemas.training import CorruptionConfig, MetaTrainConfig, SgdConfig
from puq.services import dataio, evalharness
from puq.services.basemodel import train_base
from puq.services.corruptions import make_noisy_validation
from puq.services.metamodel import build_meta, train_meta

pytestmark = pytest.mark.experiment

SEEDS = (0, 1, 2, 3, 4)


def _synthetic_run(seed: int):
    mixture = GaussianMixtureConfig()
    train, test = dataio.gen_gaussian_mixture(mixture, seed)
    ood = dataio.gen_ood_shifted(mixture, seed)
    spec = BaseModelSpec(input_dim=2, hidden_widths=(64, 32, 16), num_classes=3)
    base_sgd = SgdConfig(learning_rate=0.05, batch_size=64, max_epochs=30, seed=seed)
    base, _ = train_base(train, spec, base_sgd, test=test)
    meta_cfg = MetaTrainConfig(
        sgd=SgdConfig(learning_rate=0.05, batch_size=64, max_epochs=50, seed=seed), patience=10
    )
    return base, train, test, ood, meta_cfg


@pytest.fixture(scope="module")
def synthetic_runs():
    return {seed: _synthetic_run(seed) for seed in SEEDS}


def test_separable_blobs_are_learned():
    mixture = GaussianMixtureConfig(num_classes=2, means=[[3.0, 3.0], [-3.0, -3.0]], sigma=0.5)
    train, test = dataio.gen_gaussian_mixture(mixture, seed=0)
    spec = BaseModelSpec(input_dim=2, hidden_widths=(32, 16, 8), num_classes=2)
    model, _ = train_base(train, spec, SgdConfig(learning_rate=0.05, batch_size=32, max_epochs=5), test=test)
    assert model.test_accuracy >= 0.99


def test_synthetic_ood_detection(synthetic_runs):
    meta_auroc = []
    base_auroc = []
    for seed, (base, train, test, ood, cfg) in synthetic_runs.items():
        assert base.test_accuracy >= 0.95
        spec = MetaModelSpec.for_mode(base.tap_dims, 3, MetaMode.DIRICHLET)
        trained = train_meta(build_meta(spec, seed), base, train, cfg)
        report = evalharness.run_ood(trained, base, test, ood, seed=seed)
        for kind in ("MutualInformation", "DifferentialEntropy", "Precision"):
            assert report.metric(kind).auroc >= 0.95, (seed, kind)
        meta_auroc.append(report.metric("MutualInformation").auroc)
        base_auroc.append(next(row.auroc for row in report.baseline if row.kind == "base:Entropy"))
    assert statistics.median(meta_auroc) >= statistics.median(base_auroc)


def test_ablation_ordering(synthetic_runs):
    results: dict[AblationMode, list[float]] = {mode: [] for mode in AblationMode}
    full_accuracy = []
    for seed, (base, train, test, ood, cfg) in synthetic_runs.items():
        for mode in AblationMode:
            report = evalharness.run_ablation(mode, base, train, test, ood, cfg, seed=seed)
            kind = "MutualInformation" if mode.meta_mode.uses_elbo else "Entropy"
            results[mode].append(report.metric(kind).auroc)
            if mode is AblationMode.FULL:
                full_accuracy.append(report.accuracy)
    full = statistics.median(results[AblationMode.FULL])
    assert full >= 0.9
    assert min(full_accuracy) > 0.5
    assert full >= statistics.median(results[AblationMode.CROSS_ENT]) - 0.02
    assert full >= statistics.median(results[AblationMode.LINEAR_META]) - 0.02
    assert abs(full - statistics.median(results[AblationMode.TEN_PERCENT_DATA])) <= 0.05


def _mnist_file(root: Path, *names: str) -> Path:
    for name in names:
        for candidate in (root / name, root / f"{name}.gz"):
            if candidate.is_file():
                return candidate
    pytest.skip(f"{names[0]} not found under {root}")


@pytest.mark.skipif(settings.PUQ_MNIST_DIR is None, reason="PUQ_MNIST_DIR is not set")
def test_mnist_desk_scale():
    root = Path(settings.PUQ_MNIST_DIR)
    train = dataio.load_idx(
        _mnist_file(root, "train-images-idx3-ubyte"), _mnist_file(root, "train-labels-idx1-ubyte"), name="mnist-train"
    )
    test = dataio.load_idx(
        _mnist_file(root, "t10k-images-idx3-ubyte"), _mnist_file(root, "t10k-labels-idx1-ubyte"), name="mnist-test"
    )
    fashion_root = root / "fashion"
    fashion = dataio.load_idx(
        _mnist_file(fashion_root, "t10k-images-idx3-ubyte"),
        _mnist_file(fashion_root, "t10k-labels-idx1-ubyte"),
        name="fashion-test",
    )

    spec = BaseModelSpec(input_dim=784, hidden_widths=(256, 128, 64), num_classes=10)
    base, _ = train_base(train, spec, SgdConfig.preset("mnist-base"), test=test)
    assert base.test_accuracy >= 0.97

    corruption = CorruptionConfig.for_images((28, 28))
    cfg = MetaTrainConfig(sgd=SgdConfig.preset("mnist-meta"), corruption=corruption)
    meta_spec = MetaModelSpec.for_mode(base.tap_dims, 10, MetaMode.DIRICHLET)
    trained = train_meta(build_meta(meta_spec, 0), base, train, cfg)

    assert evalharness.run_ood(trained, base, test, fashion).metric("MutualInformation").auroc >= 0.95
    corrupted = make_noisy_validation(test, corruption, seed=[0, 30])
    assert evalharness.run_ood(trained, base, test, corrupted).metric("MutualInformation").auroc >= 0.97
    misclass = evalharness.run_misclassification(trained, base, test, metrics=["MaxProb"])
    assert misclass.metric("MaxProb").auroc >= 0.93
    assert np.isfinite(misclass.ece)
