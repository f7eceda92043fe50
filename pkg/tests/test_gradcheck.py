import numpy as np
import pytest

from asr import autodiff as ad
from asr import gradcheck
from asr.errors import ConfigurationError


@pytest.mark.parametrize("op", ["add", "mul", "div", "sigmoid", "elu", "getitem", "conv2d", "maxpool2d", "batchnorm"])
def test_elementary_ops_within_tolerance(op):
    rows = gradcheck.run_gradcheck(op, instances=3, seed=0)
    assert rows[0]["op"] == op
    assert rows[0]["tolerance"] == gradcheck.ELEMENT_TOLERANCE
    assert rows[0]["passed"], rows


@pytest.mark.parametrize("op", ["grid_sample", "paste", "mmse", "arv"])
def test_composite_ops_within_tolerance(op):
    rows = gradcheck.run_gradcheck(op, instances=2, seed=3)
    assert rows[0]["passed"], rows


@pytest.mark.slow
def test_all_ops():
    rows = gradcheck.run_gradcheck("all", instances=5)
    assert [row["op"] for row in rows] == list(gradcheck.CASES)
    assert all(row["passed"] for row in rows), [row for row in rows if not row["passed"]]


def test_end_to_end_tolerance():
    assert gradcheck.tolerance("render") == gradcheck.END_TO_END_TOLERANCE
    assert gradcheck.tolerance("sin") == gradcheck.ELEMENT_TOLERANCE


def test_resolve_ops():
    assert gradcheck.resolve_ops("all") == list(gradcheck.CASES)
    assert gradcheck.resolve_ops("add, relu") == ["add", "relu"]

    with pytest.raises(ConfigurationError, match="softmax"):
        gradcheck.resolve_ops("add,softmax")


def test_numeric_matches_analytic_for_cubic():
    def fn(x):
        return ad.sum(x * x * x)

    x = np.array([0.5, -1.5, 2.0])
    with ad.precision("f64"):
        (analytic,) = gradcheck.analytic_gradients(fn, [x])
        (numeric,) = gradcheck.numeric_gradients(fn, [x])

    np.testing.assert_allclose(analytic, 3 * x**2)
    assert gradcheck.relative_error(analytic, numeric) < 1e-6


def test_relative_error_of_zero_gradients():
    assert gradcheck.relative_error(np.zeros(3), np.zeros(3)) == 0.0
