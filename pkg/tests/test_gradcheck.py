import numpy as np
import pytest

from mammodcn.gradcheck import (
    MODEL_TOLERANCE,
    OPERATOR_CHECKS,
    OPERATOR_TOLERANCE,
    numeric_gradient,
    relative_error,
    run_suite,
)


def test_relative_error():
    assert relative_error([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert relative_error([0.0, 0.0], [0.0, 0.0]) == 0.0
    assert relative_error([1.0, 0.0], [0.0, 0.0]) == 1.0


def test_numeric_gradient_of_a_quadratic():
    x = np.array([1.0, -2.0, 0.5])
    grad = numeric_gradient(lambda: float(np.sum(x**2)), x)
    np.testing.assert_allclose(grad, 2 * x, rtol=1e-8)
    np.testing.assert_array_equal(x, [1.0, -2.0, 0.5])  # restored


@pytest.mark.parametrize("seed", [0, 1, 2])
@pytest.mark.parametrize("check", OPERATOR_CHECKS, ids=lambda c: c.__name__)
def test_operator_gradients(check, seed: int):
    for name, error in check(np.random.default_rng(seed)).items():
        assert error <= OPERATOR_TOLERANCE, name


def test_suite_report():
    report = run_suite(seed=3, include_model=False)
    assert list(report.columns) == ["check", "max_rel_error", "tolerance", "passed"]
    assert report["passed"].all()
    assert not report["check"].str.startswith("model").any()


def test_model_gradients():
    report = run_suite(seed=0)
    model = report[report["check"].str.startswith("model")]
    assert len(model) > 0
    assert (model["max_rel_error"] <= MODEL_TOLERANCE).all(), model
