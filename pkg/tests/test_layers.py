"""Finite-difference checks of every layer type in isolation (float64)."""

import numpy as np
import pytest

from goldendie.simulators.layers import (BatchNorm, Conv1x1, Conv3x3, MaxPool2, ReLU, Upsample2,
                                         bilinear_matrix)
from goldendie.simulators.unet import cross_entropy_loss, focal_loss, l2_loss

H = 1e-6


def _fd(f, arr, h=H):
    """Central differences of scalar ``f()`` w.r.t. every entry of ``arr`` (in place)."""
    out = np.zeros_like(arr)
    flat, g = arr.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        g[i] = (up - down) / (2 * h)
    return out


def _rel(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)


def _check_layer(layer, x, train=True, tol=1e-6):
    rng = np.random.default_rng(1)
    y = layer.forward(x, train)
    up = rng.standard_normal(y.shape)

    def f():
        return float(np.sum(layer.forward(x, train) * up))

    layer.forward(x, train)
    for g in layer.grads().values():
        g[...] = 0
    dx = layer.backward(up)
    assert _rel(dx, _fd(f, x)) < tol
    analytic = {k: v.copy() for k, v in layer.grads().items()}
    for name, p in layer.params().items():
        assert _rel(analytic[name], _fd(f, p)) < tol, name


def test_conv3x3():
    rng = np.random.default_rng(0)
    _check_layer(Conv3x3(3, 4, rng, np.float64), rng.standard_normal((3, 2, 5, 6)))


def test_conv1x1():
    rng = np.random.default_rng(0)
    _check_layer(Conv1x1(3, 5, rng, np.float64), rng.standard_normal((3, 2, 4, 4)))


def test_batchnorm_train_mode():
    rng = np.random.default_rng(0)
    bn = BatchNorm(3, dtype=np.float64)
    bn.gamma[:] = rng.uniform(0.5, 2, 3)
    bn.beta[:] = rng.standard_normal(3)
    bn.track_running_stats = False
    _check_layer(bn, rng.standard_normal((3, 2, 4, 4)) * 2 + 1)


def test_batchnorm_eval_mode_is_affine():
    rng = np.random.default_rng(0)
    bn = BatchNorm(2, dtype=np.float64)
    bn.running_mean[:] = [0.5, -1.0]
    bn.running_var[:] = [4.0, 0.25]
    x = rng.standard_normal((2, 3, 2, 2))
    out = bn.forward(x, train=False)
    expected = (x - bn.running_mean[:, None, None, None]) / np.sqrt(
        bn.running_var[:, None, None, None] + bn.eps)
    assert np.allclose(out, expected)


def test_batchnorm_running_stats_update():
    x = np.random.default_rng(0).standard_normal((2, 4, 3, 3))
    bn = BatchNorm(2, dtype=np.float64)
    bn.forward(x, True)
    m = x[0].size
    assert np.allclose(bn.running_mean, 0.1 * x.mean(axis=(1, 2, 3)))
    assert np.allclose(bn.running_var, 0.9 + 0.1 * x.var(axis=(1, 2, 3)) * m / (m - 1))


def test_maxpool():
    rng = np.random.default_rng(0)
    _check_layer(MaxPool2(), rng.standard_normal((2, 2, 4, 6)))


def test_maxpool_value_and_odd_size():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    assert np.array_equal(MaxPool2().forward(x)[0, 0], [[5, 7], [13, 15]])
    with pytest.raises(ValueError):
        MaxPool2().forward(np.zeros((1, 1, 3, 4)))


def test_upsample():
    rng = np.random.default_rng(0)
    _check_layer(Upsample2(), rng.standard_normal((2, 2, 3, 4)))


def test_bilinear_rows_sum_to_one_and_constant_preserved():
    m = bilinear_matrix(5)
    assert m.shape == (10, 5)
    assert np.allclose(m.sum(axis=1), 1)
    x = np.full((1, 1, 4, 4), 2.5)
    assert np.allclose(Upsample2().forward(x), 2.5)


def test_bilinear_half_pixel_weights():
    m = bilinear_matrix(4)
    assert np.allclose(m[1], [0.75, 0.25, 0, 0])
    assert np.allclose(m[2], [0.25, 0.75, 0, 0])
    assert np.allclose(m[0], [1, 0, 0, 0])


def test_relu():
    x = np.random.default_rng(0).standard_normal((2, 2, 3, 3))
    x[np.abs(x) < 1e-3] = 0.5  # keep away from the kink
    _check_layer(ReLU(), x)


@pytest.mark.parametrize("name", ["l2", "cross_entropy", "focal"])
def test_loss_gradients(name):
    rng = np.random.default_rng(3)
    if name == "l2":
        z = rng.standard_normal((2, 3, 4, 4))
        t = rng.random((2, 3, 4, 4))
        fn = l2_loss
    else:
        z = rng.standard_normal((2, 6, 4, 4)) * 2
        t = rng.integers(0, 6, (2, 4, 4))
        fn = cross_entropy_loss if name == "cross_entropy" else focal_loss
    _, grad = fn(z, t)
    numeric = _fd(lambda: float(fn(z, t)[0]), z)
    assert _rel(grad, numeric) < 1e-6


def test_focal_gamma_zero_equals_ce():
    rng = np.random.default_rng(0)
    z = rng.standard_normal((3, 8, 5, 5))
    t = rng.integers(0, 8, (3, 5, 5))
    a, ga = focal_loss(z, t, gamma=0.0)
    b, gb = cross_entropy_loss(z, t)
    assert a == b and np.array_equal(ga, gb)
