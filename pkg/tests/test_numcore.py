import numpy as np
import pytest

from setsim import numcore as nc
from oracles import conv2d_loops


def test_conv_ones_sum_to_nine():
    out = nc.conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)), np.zeros(1))
    assert out.shape == (1, 1, 1, 1)
    assert out[0, 0, 0, 0] == 9.0


def test_conv_identity_kernel():
    x = np.random.default_rng(0).normal(size=(2, 1, 5, 4))
    np.testing.assert_array_equal(nc.conv2d(x, np.ones((1, 1, 1, 1)), np.zeros(1)), x)


def test_conv_matches_loop_reference():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 3, 8, 8))
    k = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    out = nc.conv2d(x, k, b, stride=2, pad=1)
    assert out.shape == (2, 4, 4, 4)
    np.testing.assert_allclose(out, conv2d_loops(x, k, b, 2, 1), rtol=0, atol=1e-12)


@pytest.mark.parametrize("stride,pad,h,w", [(1, 0, 5, 6), (2, 0, 7, 5), (1, 2, 3, 3), (3, 1, 9, 8)])
def test_conv_loop_reference_other_shapes(stride, pad, h, w):
    rng = np.random.default_rng(h * 10 + w)
    x = rng.normal(size=(1, 2, h, w))
    k = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    np.testing.assert_allclose(nc.conv2d(x, k, b, stride, pad), conv2d_loops(x, k, b, stride, pad),
                               rtol=0, atol=1e-12)


def test_conv_rejects_channel_mismatch():
    with pytest.raises(nc.ShapeError, match="channel"):
        nc.conv2d(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)), np.zeros(1))


def test_conv_rejects_kernel_larger_than_padded_input():
    with pytest.raises(nc.ShapeError):
        nc.conv2d(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 3, 3)), np.zeros(1))


def test_conv_backward_zero_upstream():
    rng = np.random.default_rng(2)
    x, k = rng.normal(size=(1, 2, 4, 4)), rng.normal(size=(3, 2, 3, 3))
    g = nc.conv2d_backward(x, k, 1, 1, np.zeros((1, 3, 4, 4)))
    assert not g.d_input.any() and not g.d_params["weight"].any() and not g.d_params["bias"].any()


def test_conv_backward_scalar_chain_rule():
    x, w, d = 1.7, -0.4, 2.5
    g = nc.conv2d_backward(np.full((1, 1, 1, 1), x), np.full((1, 1, 1, 1), w), 1, 0, np.full((1, 1, 1, 1), d))
    assert g.d_input.item() == w * d
    assert g.d_params["weight"].item() == x * d
    assert g.d_params["bias"].item() == d


def test_conv_backward_rejects_wrong_upstream_shape():
    with pytest.raises(nc.ShapeError):
        nc.conv2d_backward(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 3, 3)), 1, 0, np.zeros((1, 1, 3, 3)))


def test_conv_backward_finite_differences():
    rng = np.random.default_rng(3)
    x, k, b = rng.normal(size=(2, 3, 5, 5)), rng.normal(size=(2, 3, 3, 3)), rng.normal(size=2)
    up = rng.normal(size=nc.conv2d(x, k, b, 2, 1).shape)
    g = nc.conv2d_backward(x, k, 2, 1, up)
    num_x = nc.finite_difference_gradient(lambda v: np.sum(nc.conv2d(v, k, b, 2, 1) * up), x)
    num_k = nc.finite_difference_gradient(lambda v: np.sum(nc.conv2d(x, v, b, 2, 1) * up), k)
    assert nc.relative_error(g.d_input, num_x) < 1e-6
    assert nc.relative_error(g.d_params["weight"], num_k) < 1e-6


def test_relu_examples():
    np.testing.assert_array_equal(nc.relu(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0])
    x = np.array([0.5, 3.0])
    np.testing.assert_array_equal(nc.relu(x), x)


def test_relu_backward_masks_nonpositive():
    np.testing.assert_array_equal(nc.relu_backward(np.array([-1.0, 0.0, 2.0]), np.ones(3)), [0, 0, 1])


def test_relu_backward_finite_differences_away_from_kink():
    rng = np.random.default_rng(4)
    x = rng.normal(size=40)
    x = x[np.abs(x) > 1e-3]
    up = rng.normal(size=x.shape)
    num = nc.finite_difference_gradient(lambda v: np.sum(nc.relu(v) * up), x)
    assert nc.relative_error(nc.relu_backward(x, up), num) < 1e-6


def test_fully_connected_examples():
    x = np.array([[1.0, 2.0]])
    np.testing.assert_array_equal(nc.fully_connected(x, np.eye(2), np.zeros(2)), x)
    np.testing.assert_array_equal(nc.fully_connected(x, np.array([[1.0], [1.0]]), np.zeros(1)), [[3.0]])


def test_fully_connected_rejects_mismatch():
    with pytest.raises(nc.ShapeError):
        nc.fully_connected(np.zeros((1, 3)), np.zeros((2, 2)), np.zeros(2))


def test_fully_connected_backward_finite_differences():
    rng = np.random.default_rng(5)
    x, w, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=2)
    up = rng.normal(size=(3, 2))
    g = nc.fully_connected_backward(x, w, up)
    for analytic, f, point in [
        (g.d_input, lambda v: np.sum(nc.fully_connected(v, w, b) * up), x),
        (g.d_params["weight"], lambda v: np.sum(nc.fully_connected(x, v, b) * up), w),
        (g.d_params["bias"], lambda v: np.sum(nc.fully_connected(x, w, v) * up), b),
    ]:
        assert nc.relative_error(analytic, nc.finite_difference_gradient(f, point)) < 1e-6


def test_pool_examples():
    np.testing.assert_array_equal(nc.global_average_pool(np.full((1, 2, 3, 3), 1.5)), [[1.5, 1.5]])
    assert nc.global_average_pool(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])).item() == 2.5


def test_pool_backward_spreads_evenly():
    d = nc.global_average_pool_backward((1, 1, 2, 2), np.array([[4.0]]))
    np.testing.assert_array_equal(d, np.ones((1, 1, 2, 2)))


def test_pool_backward_finite_differences():
    rng = np.random.default_rng(6)
    x, up = rng.normal(size=(2, 3, 3, 2)), rng.normal(size=(2, 3))
    num = nc.finite_difference_gradient(lambda v: np.sum(nc.global_average_pool(v) * up), x)
    assert nc.relative_error(nc.global_average_pool_backward(x.shape, up), num) < 1e-6


def test_normalize_examples():
    np.testing.assert_allclose(nc.l2_normalize(np.array([[3.0, 4.0]])), [[0.6, 0.8]], atol=1e-15)
    u = np.array([[0.0, 1.0, 0.0]])
    np.testing.assert_array_equal(nc.l2_normalize(u), u)


def test_normalize_zero_row_stays_zero():
    np.testing.assert_array_equal(nc.l2_normalize(np.zeros((1, 3))), np.zeros((1, 3)))


def test_normalize_unit_norm_rows():
    x = np.random.default_rng(7).normal(size=(20, 5))
    np.testing.assert_allclose(np.linalg.norm(nc.l2_normalize(x), axis=1), 1.0, atol=1e-12)


def test_normalize_backward_finite_differences():
    rng = np.random.default_rng(8)
    x, up = rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
    num = nc.finite_difference_gradient(lambda v: np.sum(nc.l2_normalize(v) * up), x)
    assert nc.relative_error(nc.l2_normalize_backward(x, up), num) < 1e-6


def test_fd_square_at_three():
    g = nc.finite_difference_gradient(lambda v: float(v[0] ** 2), np.array([3.0]), 1e-5)
    assert abs(g[0] - 6.0) < 1e-8


def test_fd_constant_is_zero():
    g = nc.finite_difference_gradient(lambda v: 4.2, np.ones(5))
    np.testing.assert_array_equal(g, np.zeros(5))


def test_fd_sum_of_squares():
    x = np.random.default_rng(9).normal(size=7)
    np.testing.assert_allclose(nc.finite_difference_gradient(lambda v: float(np.sum(v * v)), x), 2 * x,
                               rtol=0, atol=1e-7)


def test_fd_reports_offending_coordinate():
    def f(v):
        return np.inf if v[1, 0] > 0.5 else 0.0
    with pytest.raises(FloatingPointError, match=r"\(1, 0\)"):
        nc.finite_difference_gradient(f, np.array([[0.0, 0.0], [0.5, 0.0]]))


def test_fd_leaves_point_untouched():
    x = np.arange(4.0)
    nc.finite_difference_gradient(lambda v: float(v.sum()), x)
    np.testing.assert_array_equal(x, np.arange(4.0))


def test_operations_are_bit_deterministic():
    rng = np.random.default_rng(10)
    x, k, b = rng.normal(size=(2, 3, 6, 6)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
    assert np.array_equal(nc.conv2d(x, k, b, 2, 1), nc.conv2d(x, k, b, 2, 1))
