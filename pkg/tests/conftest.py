import struct
import sys
from pathlib import Path

import numpy as np
import pytest

PROJECT_ROOT = Path(__file__).resolve().parent.parent
if str(PROJECT_ROOT) not in sys.path:
    sys.path.insert(0, str(PROJECT_ROOT))

from puq.schemas.data import GaussianMixtureConfig  # noqa: E402
from puq.schemas.models import BaseModelSpec, MetaMode, MetaModelSpec  # noqa: E402
from puq.schemas.training import MetaTrainConfig, SgdConfig  # noqa: E402
from puq.services.basemodel import train_base  # noqa: E402
from puq.services.dataio import gen_gaussian_mixture, gen_ood_shifted  # noqa: E402
from puq.services.metamodel import build_meta, train_meta  # noqa: E402

TASK_SEED = 3


def write_idx(directory: Path, stem: str, images: np.ndarray, labels: np.ndarray) -> tuple[Path, Path]:
    """Write an uncompressed IDX image/label pair; ``images`` is (N, rows, cols) uint8."""
    count, rows, cols = images.shape
    image_path = directory / f"{stem}-images-idx3-ubyte"
    label_path = directory / f"{stem}-labels-idx1-ubyte"
    image_path.write_bytes(struct.pack(">IIII", 0x00000803, count, rows, cols) + images.astype(np.uint8).tobytes())
    label_path.write_bytes(struct.pack(">II", 0x00000801, count) + labels.astype(np.uint8).tobytes())
    return image_path, label_path


@pytest.fixture(scope="session")
def mixture_config():
    return GaussianMixtureConfig(samples_per_class=150)


@pytest.fixture(scope="session")
def synthetic_task(mixture_config):
    train, test = gen_gaussian_mixture(mixture_config, seed=TASK_SEED)
    ood = gen_ood_shifted(mixture_config, seed=TASK_SEED)
    return train, test, ood


@pytest.fixture(scope="session")
def base_spec():
    return BaseModelSpec(input_dim=2, hidden_widths=(16, 8, 4), num_classes=3)


@pytest.fixture(scope="session")
def trained_base(synthetic_task, base_spec):
    train, test, _ = synthetic_task
    sgd = SgdConfig(learning_rate=0.05, momentum=0.9, weight_decay=5e-4, batch_size=32, max_epochs=15, seed=TASK_SEED)
    model, _ = train_base(train, base_spec, sgd, test=test)
    return model


@pytest.fixture(scope="session")
def meta_config():
    sgd = SgdConfig(learning_rate=0.05, momentum=0.9, weight_decay=5e-4, batch_size=32, max_epochs=20, seed=TASK_SEED)
    return MetaTrainConfig(sgd=sgd, patience=6)


@pytest.fixture(scope="session")
def trained_meta(synthetic_task, trained_base, meta_config):
    train, _, _ = synthetic_task
    spec = MetaModelSpec.for_mode(trained_base.tap_dims, 3, MetaMode.DIRICHLET)
    return train_meta(build_meta(spec, seed=TASK_SEED), trained_base, train, meta_config)


@pytest.fixture()
def output_dir(tmp_path):
    target = tmp_path / "out"
    target.mkdir()
    return target


@pytest.fixture()
def idx_writer(tmp_path):
    def _write(stem: str, images: np.ndarray, labels: np.ndarray) -> tuple[Path, Path]:
        return write_idx(tmp_path, stem, np.asarray(images), np.asarray(labels))

    return _write
