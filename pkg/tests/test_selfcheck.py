import numpy as np

from puq.services import selfcheck


def test_special_function_checks_pass():
    results = selfcheck.check_special_functions()
    assert results
    assert all(result.passed for result in results), [r.detail for r in results if not r.passed]


def test_recurrences_report_absolute_error_for_digamma_and_trigamma():
    details = {result.name: result.detail for result in selfcheck.check_special_functions()}
    assert details["digamma(x+1) - digamma(x) = 1/x"].startswith("worst absolute error")
    assert details["trigamma(x) - trigamma(x+1) = 1/x^2"].startswith("worst absolute error")


def test_gradient_instances_stay_clear_of_relu_kinks():
    for trial in range(10):
        meta, taps = selfcheck._gradient_instance(np.random.default_rng([3, trial]))
        assert selfcheck._pre_activation_margin(meta, taps) > selfcheck.KINK_MARGIN
        biases = [layer.bias for reducer in meta.reducers for layer in reducer.layers]
        assert all(np.all(bias != 0.0) for bias in biases)


def test_elbo_gradient_check_passes():
    [result] = selfcheck.check_elbo_gradients(trials=10)
    assert result.passed, result.detail
