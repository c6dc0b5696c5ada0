import numpy as np
import pytest

import oracles
from splatguide import DimensionError
from splatguide.gradients import SOBEL_X, GradientField, edge_magnitude, sobel_gradients


def test_constant_image_has_no_gradient():
    g = sobel_gradients(np.full((6, 6, 1), 0.4))
    assert not g.gx.any() and not g.gy.any()


def test_vertical_step():
    img = np.zeros((6, 8, 1), np.float32)
    img[:, 4:] = 1
    g = sobel_gradients(img)
    # columns 3 and 4 straddle the step; intensity rises with column index
    np.testing.assert_array_equal(g.gx[1:-1, 3], 4)
    np.testing.assert_array_equal(g.gx[1:-1, 4], 4)
    assert not g.gx[:, :3].any() and not g.gx[:, 5:].any()
    assert not g.gy.any()


def test_matches_loop_oracle(rng):
    img = rng.uniform(size=(8, 8, 1)).astype(np.float32)
    g = sobel_gradients(img)
    np.testing.assert_allclose(g.gx, oracles.correlate_replicate(img[:, :, 0], SOBEL_X), atol=1e-6)
    np.testing.assert_allclose(g.gy, oracles.correlate_replicate(img[:, :, 0], SOBEL_X.T), atol=1e-6)


def test_linearity_and_transpose(rng):
    img = rng.uniform(size=(7, 7, 1)).astype(np.float32)
    a = sobel_gradients(img)
    b = sobel_gradients(img * 0.5)
    np.testing.assert_allclose(b.gx, 0.5 * a.gx, atol=1e-6)
    t = sobel_gradients(img.transpose(1, 0, 2))
    np.testing.assert_allclose(t.gx, a.gy.T, atol=1e-6)
    np.testing.assert_allclose(t.gy, a.gx.T, atol=1e-6)


def test_rgb_rejected():
    with pytest.raises(DimensionError):
        sobel_gradients(np.zeros((4, 4, 3)))


def test_edge_magnitude():
    e = edge_magnitude(GradientField(np.float32([[3.0, 0.0]]), np.float32([[4.0, 0.0]])))
    assert e.role == "edge"
    np.testing.assert_array_equal(e.data, [[5.0, 0.0]])


def test_edge_magnitude_oracle(rng):
    gx, gy = rng.normal(size=(2, 5, 5)).astype(np.float32)
    e = edge_magnitude(GradientField(gx, gy)).data
    for i in range(5):
        for j in range(5):
            assert e[i, j] == pytest.approx(float(np.hypot(gx[i, j], gy[i, j])), rel=1e-6)
    assert np.all(e >= np.maximum(np.abs(gx), np.abs(gy)) / np.sqrt(2) - 1e-6)
