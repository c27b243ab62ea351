"""Tests for the network layer primitives against direct loop implementations."""

import numpy as np
import pytest

from vertebra_locator.errors import ShapeError
from vertebra_locator.layers import (
    concat_channels,
    conv3d_backward,
    conv3d_forward,
    linear_upsample_matrix,
    maxpool2,
    maxpool2_backward,
    relu,
    relu_backward,
    split_channels,
    upsample2,
    upsample2_backward,
)


def naive_conv(x, kernel, bias):
    cin, nx, ny, nz = x.shape
    cout, _, k, _, _ = kernel.shape
    p = k // 2
    out = np.zeros((cout, nx, ny, nz))
    for o in range(cout):
        for i in range(nx):
            for j in range(ny):
                for l in range(nz):
                    total = bias[o]
                    for c in range(cin):
                        for a in range(k):
                            for b in range(k):
                                for d in range(k):
                                    ii, jj, ll = i + a - p, j + b - p, l + d - p
                                    if 0 <= ii < nx and 0 <= jj < ny and 0 <= ll < nz:
                                        total += x[c, ii, jj, ll] * kernel[o, c, a, b, d]
                    out[o, i, j, l] = total
    return out


@pytest.mark.parametrize("case", range(50))
def test_conv_matches_direct_sum(case):
    rng = np.random.default_rng(case)
    k = int(rng.choice([1, 3]))
    cin, cout = rng.integers(1, 3, size=2)
    dims = rng.integers(1, 5, size=3)
    x = rng.normal(size=(cin, *dims))
    kernel = rng.normal(size=(cout, cin, k, k, k))
    bias = rng.normal(size=cout)
    np.testing.assert_allclose(conv3d_forward(x, kernel, bias), naive_conv(x, kernel, bias), atol=1e-12)


def test_conv_identity_kernel():
    x = np.random.default_rng(0).normal(size=(1, 3, 4, 5))
    kernel = np.zeros((1, 1, 3, 3, 3))
    kernel[0, 0, 1, 1, 1] = 1.0
    np.testing.assert_allclose(conv3d_forward(x, kernel, np.zeros(1)), x)


def test_conv_shape_errors():
    with pytest.raises(ShapeError):
        conv3d_forward(np.zeros((2, 3, 3, 3)), np.zeros((1, 1, 3, 3, 3)), np.zeros(1))
    with pytest.raises(ShapeError):
        conv3d_forward(np.zeros((1, 3, 3, 3)), np.zeros((1, 1, 2, 2, 2)), np.zeros(1))


def test_conv_backward_is_adjoint():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(2, 4, 3, 5))
    kernel = rng.normal(size=(3, 2, 3, 3, 3))
    g = rng.normal(size=(3, 4, 3, 5))
    grad_in, grad_kernel, grad_bias = conv3d_backward(g, x, kernel)
    # <conv(x), g> is linear in x and in the kernel
    linear = conv3d_forward(x, kernel, np.zeros(3))
    assert np.sum(linear * g) == pytest.approx(np.sum(grad_in * x))
    assert np.sum(linear * g) == pytest.approx(np.sum(grad_kernel * kernel))
    np.testing.assert_allclose(grad_bias, g.sum(axis=(1, 2, 3)))


def test_maxpool_and_routing():
    x = np.arange(8.0).reshape(1, 2, 2, 2)
    assert maxpool2(x).item() == 7.0
    grad = maxpool2_backward(np.ones((1, 1, 1, 1)), x)
    assert grad[0, 1, 1, 1] == 1.0 and grad.sum() == 1.0
    tied = np.ones((1, 2, 2, 2))
    grad = maxpool2_backward(np.ones((1, 1, 1, 1)), tied)
    assert grad[0, 0, 0, 0] == 1.0 and grad.sum() == 1.0
    with pytest.raises(ShapeError):
        maxpool2(np.zeros((1, 3, 2, 2)))


def test_upsample_weights_and_constants():
    m = linear_upsample_matrix(4)
    np.testing.assert_allclose(m.sum(axis=1), 1.0)
    np.testing.assert_allclose(m[1], [0.75, 0.25, 0, 0])
    x = np.full((2, 2, 3, 4), 5.0)
    y = upsample2(x)
    assert y.shape == (2, 4, 6, 8)
    np.testing.assert_allclose(y, 5.0)


def test_upsample_backward_is_adjoint():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 3, 2, 4))
    g = rng.normal(size=(2, 6, 4, 8))
    assert np.sum(upsample2(x) * g) == pytest.approx(np.sum(upsample2_backward(g) * x))


def test_concat_and_split():
    a, b = np.zeros((2, 2, 2, 2)), np.ones((3, 2, 2, 2))
    joined = concat_channels(a, b)
    assert joined.shape[0] == 5
    left, right = split_channels(joined, 2)
    np.testing.assert_array_equal(right, b)
    with pytest.raises(ShapeError):
        concat_channels(a, np.ones((1, 4, 2, 2)))


def test_relu_and_its_gradient_mask():
    x = np.array([[[[-1.0, 0.0, 2.0]]]])
    np.testing.assert_array_equal(relu(x), [[[[0.0, 0.0, 2.0]]]])
    np.testing.assert_array_equal(relu_backward(np.ones_like(x), x), [[[[0.0, 0.0, 1.0]]]])
