import math
from dataclasses import dataclass, field

import numpy as np
import pytest

from puq.core.errors import ConfigurationError, PuqError, ShapeError
from puq.schemas.models import MetaMode, MetaModelSpec
from puq.schemas.training import ElboConfig, MetaTrainConfig, SgdConfig, StopMetric
from puq.services import metamodel
from puq.services.dataio import Dataset
from puq.services.dirichlet import ElboObjective, PriorParams
from puq.services.metamodel import CacheFeaturizer, EarlyStopping, build_meta, reducer_widths, train_meta
from puq.services.uqmetrics import MetricKind


@pytest.mark.parametrize(
    ("tap_dim", "classes", "expected"),
    [(64, 3, [64, 32, 16, 8, 4, 3]), (3, 3, [3, 3]), (10, 2, [10, 5, 3, 2]), (256, 10, [256, 128, 64, 32, 16, 10])],
)
def test_reducer_widths(tap_dim, classes, expected):
    assert reducer_widths(tap_dim, classes) == expected


def test_reducer_rejects_narrow_taps():
    with pytest.raises(ConfigurationError):
        reducer_widths(2, 3)
    with pytest.raises(ConfigurationError):
        build_meta(MetaModelSpec(tap_dims=(8, 2), num_classes=3), seed=0)


def test_dirichlet_meta_structure():
    meta = build_meta(MetaModelSpec(tap_dims=(16, 8), num_classes=3), seed=1)
    assert [reducer.widths for reducer in meta.reducers] == [[16, 8, 4, 3], [8, 4, 3]]
    assert meta.combiner.widths == [6, 3]


@pytest.mark.parametrize("mode", [MetaMode.LINEAR_META, MetaMode.LAST_LAYER])
def test_single_tap_modes_use_only_the_final_tap(mode):
    spec = MetaModelSpec.for_mode((16, 8, 4), 3, mode)
    assert spec.tap_dims == (4,)
    meta = build_meta(spec, seed=2)
    assert meta.reducers == []
    taps = [np.ones((2, 16)), np.ones((2, 8)), np.random.default_rng(0).random((2, 4))]
    np.testing.assert_array_equal(meta.log_alpha(taps), meta.log_alpha(taps[-1:]))


def test_single_tap_spec_rejects_several_taps():
    with pytest.raises(ValueError):
        MetaModelSpec(tap_dims=(8, 4), num_classes=3, mode=MetaMode.LINEAR_META)


def test_log_alpha_is_clamped():
    meta = build_meta(MetaModelSpec(tap_dims=(4,), num_classes=2, mode=MetaMode.LAST_LAYER, logit_clamp=15.0), seed=0)
    weights = meta.combiner.layers[0].weights
    weights[...] = 0.0
    weights[0, 0] = 100.0
    log_alpha = meta.log_alpha([np.array([[1.0, 0.0, 0.0, 0.0], [-1.0, 0.0, 0.0, 0.0]])])
    np.testing.assert_array_equal(log_alpha[:, 0], [15.0, -15.0])


def test_saturated_outputs_only_pass_recovering_gradients():
    meta = build_meta(MetaModelSpec(tap_dims=(2,), num_classes=2, mode=MetaMode.LAST_LAYER, logit_clamp=1.0), seed=0)
    meta.combiner.layers[0].weights[...] = np.array([[50.0, 0.0], [0.0, 0.1]])
    taps = [np.array([[1.0, 1.0]])]
    objective = ElboObjective(0.1, PriorParams.uniform(2))
    _, pushing_out = metamodel.meta_loss_and_grad(meta, taps, np.array([0]), objective)
    assert pushing_out[0][0, 0] == 0.0
    assert pushing_out[0][1, 1] != 0.0
    _, pulling_in = metamodel.meta_loss_and_grad(meta, taps, np.array([1]), objective)
    assert pulling_in[0][0, 0] > 0.0


def test_clamp_backward_masks():
    raw = np.array([[20.0, 20.0, -20.0, -20.0, 3.0]])
    grad = np.array([[1.0, -1.0, 1.0, -1.0, 2.0]])
    np.testing.assert_array_equal(metamodel.clamp_backward(raw, grad, 15.0), [[1.0, 0.0, 0.0, -1.0, 2.0]])


def test_zero_weight_meta_outputs_uniform_concentrations():
    meta = build_meta(MetaModelSpec(tap_dims=(6, 4), num_classes=3), seed=4)
    for param in meta.parameters():
        param[...] = 0.0
    taps = [np.random.default_rng(4).normal(size=(5, 6)), np.ones((5, 4))]
    np.testing.assert_array_equal(meta.log_alpha(taps), np.zeros((5, 3)))
    np.testing.assert_array_equal(meta.alpha(taps), np.ones((5, 3)))


@pytest.mark.parametrize("mode", [MetaMode.DIRICHLET, MetaMode.LAST_LAYER])
def test_folded_scaling_matches_standardized_inputs(mode):
    spec = MetaModelSpec.for_mode((6, 4), 3, mode)
    meta = build_meta(spec, seed=9)
    rng = np.random.default_rng(9)
    taps = [rng.normal(5.0, 3.0, size=(20, 6)), np.abs(rng.normal(0.0, 20.0, size=(20, 4)))]
    selected = taps[-1:] if mode.single_tap else taps
    scaling = metamodel.TapScaling.fit(selected)
    folded = meta.copy()
    metamodel.fold_tap_scaling(folded, scaling)
    np.testing.assert_allclose(folded.log_alpha(taps), meta.log_alpha(scaling.apply(selected)), rtol=1e-10, atol=1e-10)


def test_tap_scaling_leaves_constant_features_unscaled():
    tap = np.column_stack([np.full(4, 2.5), np.array([0.0, 1.0, 2.0, 3.0])])
    scaling = metamodel.TapScaling.fit([tap])
    standardized = scaling.apply([tap])[0]
    np.testing.assert_array_equal(standardized[:, 0], np.zeros(4))
    assert standardized[:, 1].std() == pytest.approx(1.0)


def test_meta_forward_single_sample_matches_batch():
    meta = build_meta(MetaModelSpec(tap_dims=(6, 4), num_classes=3), seed=5)
    rng = np.random.default_rng(5)
    taps = [rng.random((3, 6)), rng.random((3, 4))]
    single = metamodel.meta_forward(meta, [taps[0][2], taps[1][2]])
    np.testing.assert_allclose(single, meta.log_alpha(taps)[2])


def test_meta_forward_shape_errors():
    meta = build_meta(MetaModelSpec(tap_dims=(6, 4), num_classes=3), seed=5)
    with pytest.raises(ShapeError):
        meta.log_alpha([np.ones((1, 6))])
    with pytest.raises(ShapeError):
        meta.log_alpha([np.ones((1, 6)), np.ones((1, 5))])


def test_meta_gradients_match_finite_differences():
    meta = build_meta(MetaModelSpec(tap_dims=(6, 4), num_classes=3), seed=7)
    rng = np.random.default_rng(7)
    taps = [rng.random((4, 6)), rng.random((4, 4))]
    labels = np.array([0, 1, 2, 1])
    objective = ElboObjective(0.1, PriorParams.uniform(3))
    _, grads = metamodel.meta_loss_and_grad(meta, taps, labels, objective)
    step = 1e-6
    for param, grad in zip(meta.parameters(), grads):
        flat = param.reshape(-1)
        for index in range(0, flat.size, max(1, flat.size // 5)):
            original = flat[index]
            flat[index] = original + step
            plus = metamodel.meta_loss(meta, taps, labels, objective)
            flat[index] = original - step
            minus = metamodel.meta_loss(meta, taps, labels, objective)
            flat[index] = original
            assert grad.reshape(-1)[index] == pytest.approx((plus - minus) / (2 * step), rel=1e-4, abs=1e-7)


def test_early_stopping_ties_keep_the_earliest_epoch():
    stopper = EarlyStopping(patience=2)
    assert stopper.update(1, 0.8)
    assert not stopper.update(2, 0.8)
    assert not stopper.should_stop
    assert not stopper.update(3, 0.7)
    assert stopper.should_stop
    assert stopper.best_epoch == 1


def test_early_stopping_minimizes_losses():
    stopper = EarlyStopping(patience=3, maximize=False)
    for epoch, value in enumerate([1.0, 0.5, 0.6, 0.4], start=1):
        stopper.update(epoch, value)
    assert stopper.best_epoch == 4
    assert stopper.wait == 0


def test_trained_meta_records_training(trained_meta, trained_base, meta_config):
    assert trained_meta.n_train_samples == 360
    assert trained_meta.lam == 0.1
    assert trained_meta.beta == (1.0, 1.0, 1.0)
    assert trained_meta.ood_metric is MetricKind.MUTUAL_INFORMATION
    assert 1 <= trained_meta.best_epoch <= trained_meta.stopped_epoch <= meta_config.sgd.max_epochs
    assert len(trained_meta.history) == trained_meta.stopped_epoch
    assert trained_meta.best_record.epoch == trained_meta.best_epoch
    assert trained_meta.history[-1].train_loss < trained_meta.initial_train_loss
    assert all(not param.flags.writeable for param in trained_meta.model.parameters())
    assert trained_base.current_checksum() == trained_base.checksum


def test_best_epoch_has_the_best_stop_value(trained_meta):
    best = max(record.stop_value for record in trained_meta.history)
    first_best = next(record.epoch for record in trained_meta.history if record.stop_value == best)
    assert trained_meta.best_epoch == first_best


def _cached_task(n_per_class: int = 40):
    rng = np.random.default_rng(17)
    centers = np.array([[3.0, 0.0, 0.0, 0.0, 0.0], [0.0, 3.0, 0.0, 0.0, 0.0], [0.0, 0.0, 3.0, 0.0, 0.0]])
    inputs = np.concatenate([rng.normal(center, 0.5, size=(n_per_class, 5)) for center in centers])
    labels = np.repeat(np.arange(3), n_per_class)
    return Dataset(np.abs(inputs), labels, num_classes=3, name="cached")


def _short_config(**overrides) -> MetaTrainConfig:
    sgd = SgdConfig(learning_rate=0.05, batch_size=16, max_epochs=3, seed=1)
    return MetaTrainConfig(sgd=sgd, patience=2, **overrides)


def test_data_fraction_takes_ceiling():
    meta = build_meta(MetaModelSpec(tap_dims=(5,), num_classes=3), seed=0)
    result = train_meta(meta, CacheFeaturizer((5,), 3), _cached_task(), _short_config(data_fraction=0.1))
    assert result.n_train_samples == math.ceil(0.1 * 120)


def test_patience_one_stops_after_a_single_worse_epoch(monkeypatch):
    values = iter([0.9, 0.8, 0.95, 0.99])
    monkeypatch.setattr(metamodel, "_stop_value", lambda *args: next(values))
    cfg = MetaTrainConfig(sgd=SgdConfig(learning_rate=0.05, batch_size=16, max_epochs=4, seed=1), patience=1)
    meta = build_meta(MetaModelSpec(tap_dims=(5,), num_classes=3), seed=0)
    result = train_meta(meta, CacheFeaturizer((5,), 3), _cached_task(), cfg)
    assert result.stopped_epoch == 2
    assert result.best_epoch == 1
    assert [record.stop_value for record in result.history] == [0.9, 0.8]


def test_validation_loss_stop_metric_minimizes():
    meta = build_meta(MetaModelSpec(tap_dims=(5,), num_classes=3), seed=0)
    result = train_meta(meta, CacheFeaturizer((5,), 3), _cached_task(), _short_config(stop_metric=StopMetric.VAL_LOSS))
    best = min(record.stop_value for record in result.history)
    assert result.best_record.stop_value == best
    assert result.ood_metric is None


def test_cross_entropy_mode_stops_on_entropy():
    spec = MetaModelSpec(tap_dims=(5,), num_classes=3, mode=MetaMode.CROSS_ENT)
    result = train_meta(build_meta(spec, seed=0), CacheFeaturizer((5,), 3), _cached_task(), _short_config())
    assert result.ood_metric is MetricKind.ENTROPY


def test_explicit_lambda_and_prior_are_used():
    cfg = _short_config(elbo=ElboConfig(lam=0.5, beta=[1.0, 2.0, 3.0]))
    meta = build_meta(MetaModelSpec(tap_dims=(5,), num_classes=3), seed=0)
    result = train_meta(meta, CacheFeaturizer((5,), 3), _cached_task(), cfg)
    assert result.lam == 0.5
    assert result.beta == (1.0, 2.0, 3.0)


def test_class_count_mismatch_is_rejected():
    meta = build_meta(MetaModelSpec(tap_dims=(5,), num_classes=4), seed=0)
    with pytest.raises(ShapeError):
        train_meta(meta, CacheFeaturizer((5,), 4), _cached_task(), _short_config())


@dataclass
class _DriftingFeaturizer:
    """Cache featurizer whose reported checksum changes after every call."""

    tap_dims: tuple[int, ...]
    num_classes: int
    calls: list[int] = field(default_factory=list)

    def taps(self, inputs: np.ndarray) -> list[np.ndarray]:
        return CacheFeaturizer(self.tap_dims, self.num_classes).taps(inputs)

    def current_checksum(self) -> str:
        self.calls.append(1)
        return str(len(self.calls))


def test_changed_base_parameters_abort_training():
    meta = build_meta(MetaModelSpec(tap_dims=(5,), num_classes=3), seed=0)
    with pytest.raises(PuqError, match="changed"):
        train_meta(meta, _DriftingFeaturizer((5,), 3), _cached_task(), _short_config())
