from dataclasses import dataclass
from typing import Tuple

import numpy as np
import pytest

from mammodcn.errors import RejectedInput
from mammodcn.tensor_core import (
    Point2,
    add,
    as_tensor,
    bilinear_gather,
    bilinear_sample,
    bilinear_sample_grad,
    col2im,
    conv_output_extent,
    im2col,
    mean_axes,
    relu,
    relu_grad,
    sum_axes,
)

MAP = np.arange(12, dtype=np.float64).reshape(3, 4)


@dataclass
class SampleCase:
    point: Tuple[float, float]
    expected: float


sample_cases = [
    SampleCase((0.0, 0.0), 0.0),  # exact grid point
    SampleCase((2.0, 3.0), 11.0),  # last pixel
    SampleCase((0.5, 0.5), 2.5),  # mean of the four neighbours
    SampleCase((1.0, 1.25), 5.25),  # along a row only
    SampleCase((-1.0, 0.0), 0.0),  # fully outside: zero padding
    SampleCase((-0.5, 0.0), 0.0),  # half outside: 0.5 * 0 + 0.5 * map[0, 0]
    SampleCase((2.5, 3.0), 5.5),  # half outside at the far edge
]


@pytest.mark.parametrize("case", sample_cases)
def test_bilinear_sample(case: SampleCase):
    assert bilinear_sample(MAP, Point2(*case.point)) == pytest.approx(case.expected)


def test_bilinear_gradient_is_right_sided_at_integer_points():
    _, grad = bilinear_sample_grad(MAP, Point2(1.0, 1.0), 1.0)
    # Moving down one row adds 4, moving right one column adds 1.
    assert grad.row == pytest.approx(4.0)
    assert grad.col == pytest.approx(1.0)


def test_bilinear_gradient_with_respect_to_map_is_the_weights():
    grad_x, _ = bilinear_sample_grad(MAP, Point2(0.25, 1.5), 2.0)
    expected = np.zeros_like(MAP)
    expected[0, 1] = 2.0 * 0.75 * 0.5
    expected[0, 2] = 2.0 * 0.75 * 0.5
    expected[1, 1] = 2.0 * 0.25 * 0.5
    expected[1, 2] = 2.0 * 0.25 * 0.5
    np.testing.assert_allclose(grad_x, expected)


def test_non_finite_point_rejected():
    with pytest.raises(RejectedInput):
        Point2(float("nan"), 0.0)
    with pytest.raises(RejectedInput):
        bilinear_gather(MAP[None], [np.inf], [0.0])


@pytest.mark.parametrize("far", [1e300, -1e300, 1e19, -9.5e18])
def test_far_away_points_sample_zero(far: float):
    for point in (Point2(far, 1.0), Point2(1.0, far), Point2(far, far)):
        assert bilinear_sample(MAP, point) == 0.0
        grad_x, grad_p = bilinear_sample_grad(MAP, point, 1.0)
        np.testing.assert_array_equal(grad_x, 0.0)
        assert grad_p == Point2(0.0, 0.0)


@dataclass
class MapCase:
    height: int
    width: int
    seed: int


map_cases = [
    MapCase(1, 1, 0),
    MapCase(2, 3, 1),
    MapCase(3, 4, 2),
    MapCase(5, 5, 3),
    MapCase(4, 7, 4),
]


@pytest.mark.parametrize("case", map_cases)
def test_samples_at_integer_points_are_the_pixels(case: MapCase):
    x = np.random.default_rng(case.seed).normal(size=(case.height, case.width))
    for r in range(case.height):
        for c in range(case.width):
            assert bilinear_sample(x, Point2(float(r), float(c))) == x[r, c]


@pytest.mark.parametrize("case", map_cases)
def test_sampling_is_linear_in_the_map(case: MapCase):
    rng = np.random.default_rng(case.seed)
    shape = (case.height, case.width)
    for _ in range(50):
        x, y = rng.normal(size=shape), rng.normal(size=shape)
        a, b = rng.normal(size=2)
        p = Point2(*rng.uniform(-1.0, [case.height, case.width]))
        combined = bilinear_sample(a * x + b * y, p)
        expected = a * bilinear_sample(x, p) + b * bilinear_sample(y, p)
        assert combined == pytest.approx(expected, rel=0, abs=1e-12)


@pytest.mark.parametrize("case", map_cases[1:])
def test_map_gradient_is_a_partition_of_unity_inside(case: MapCase):
    rng = np.random.default_rng(case.seed)
    x = rng.normal(size=(case.height, case.width))
    for _ in range(50):
        # All four neighbours inside: 0 <= p < extent - 1.
        p = Point2(*rng.uniform(0.0, [case.height - 1, case.width - 1]))
        upstream = float(rng.normal())
        grad_x, _ = bilinear_sample_grad(x, p, upstream)
        assert grad_x.sum() == pytest.approx(upstream, rel=1e-12, abs=1e-12)


def test_gather_matches_single_samples():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 5, 6))
    rows = rng.uniform(-1, 6, (3, 4))
    cols = rng.uniform(-1, 7, (3, 4))
    out = bilinear_gather(x, rows, cols)
    assert out.shape == (2, 3, 4)
    for c in range(2):
        for i in range(3):
            for j in range(4):
                assert out[c, i, j] == pytest.approx(
                    bilinear_sample(x[c], Point2(rows[i, j], cols[i, j]))
                )


def test_shape_checks():
    with pytest.raises(RejectedInput):
        add(np.zeros((2, 3)), np.zeros((3, 2)))
    with pytest.raises(RejectedInput):
        as_tensor(np.zeros((1, 1, 1, 1, 1)))
    with pytest.raises(RejectedInput):
        as_tensor(np.zeros((0, 3)))
    with pytest.raises(RejectedInput):
        as_tensor(np.zeros((2, 3)), ndim=3)


def test_elementwise_and_reductions():
    x = np.array([[-1.0, 2.0], [0.0, 3.0]])
    np.testing.assert_array_equal(relu(x), [[0.0, 2.0], [0.0, 3.0]])
    np.testing.assert_array_equal(relu_grad(x), [[0.0, 1.0], [0.0, 1.0]])
    assert sum_axes(x) == 4.0
    np.testing.assert_array_equal(sum_axes(x, [0]), [-1.0, 5.0])
    np.testing.assert_array_equal(mean_axes(x, 1), [0.5, 1.5])


@dataclass
class ExtentCase:
    extent: int
    kernel: int
    stride: int
    pad: int
    expected: int


extent_cases = [
    ExtentCase(8, 3, 1, 1, 8),
    ExtentCase(8, 3, 2, 1, 4),
    ExtentCase(8, 1, 2, 0, 4),
    ExtentCase(7, 5, 2, 2, 4),
    ExtentCase(3, 3, 1, 0, 1),
]


@pytest.mark.parametrize("case", extent_cases)
def test_conv_output_extent(case: ExtentCase):
    assert (
        conv_output_extent(case.extent, case.kernel, case.stride, case.pad)
        == case.expected
    )


def test_kernel_larger_than_input_rejected():
    with pytest.raises(RejectedInput):
        conv_output_extent(2, 5, 1, 0)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_col2im_is_adjoint_of_im2col(stride: int, pad: int):
    rng = np.random.default_rng(stride * 10 + pad)
    x = rng.normal(size=(2, 7, 6))
    cols = im2col(x, 3, 3, stride, pad)
    other = rng.normal(size=cols.shape)
    lhs = np.sum(cols * other)
    rhs = np.sum(x * col2im(other, x.shape, 3, 3, stride, pad))
    assert lhs == pytest.approx(rhs, rel=1e-12)
