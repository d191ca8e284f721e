import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bireal import ops
from bireal.ops import SurrogateKind
from bireal.tensor import sign

finite = st.floats(-3, 3, allow_nan=False)


def poly_reference(x):
    # piecewise definition, written out branch by branch
    if x < -1:
        return -1.0
    if x < 0:
        return 2 * x + x * x
    if x < 1:
        return 2 * x - x * x
    return 1.0


@given(finite)
def test_poly_forward_branches(x):
    assert ops.poly_forward(np.float64(x)) == pytest.approx(poly_reference(x), abs=1e-12)


def test_poly_derivative_kinks():
    d = ops.poly_derivative(np.array([-1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5]))
    np.testing.assert_array_equal(d, [0, 0, 1, 2, 1, 0, 0])


def test_clip_gate_is_open_interval():
    g = ops.clip_ste_backward(np.array([-1.0, -0.999, 0.0, 0.999, 1.0]), np.ones(5))
    np.testing.assert_array_equal(g, [0, 1, 1, 1, 0])


def test_area_values():
    assert ops.approximation_area(SurrogateKind.CLIP_STE) == pytest.approx(1.0, abs=1e-12)
    assert ops.approximation_area(SurrogateKind.PIECEWISE_POLY) == pytest.approx(2 / 3, abs=1e-12)
    # F matches sign outside [-1, 1]
    assert ops.approximation_area(SurrogateKind.PIECEWISE_POLY, -3, 3) == pytest.approx(2 / 3, abs=1e-12)


@given(arrays(np.float64, (3, 2, 3, 3), elements=st.floats(-2, 2)))
def test_magnitude_aware_binarize(w):
    out = ops.magnitude_aware_binarize(w)
    for o in range(w.shape[0]):
        np.testing.assert_array_equal(out[o], np.mean(np.abs(w[o])) * sign(w[o]))


def test_layer_scope_scale(rng):
    w = rng.standard_normal((4, 3, 3, 3))
    s = ops.kernel_scale(w, "layer")
    assert np.allclose(s, np.abs(w).mean())


def test_weight_ste_gates():
    w = np.array([-1.0, -0.5, 1.0, 2.0])
    g = np.ones(4)
    np.testing.assert_array_equal(ops.magnitude_aware_backward(w, g), [0, 1, 0, 0])
    np.testing.assert_array_equal(ops.original_ste_backward(w, g), [1, 1, 1, 0])


@pytest.mark.parametrize("scope", ["kernel", "layer"])
def test_scaled_poly_weight_backward_fd(scope, rng):
    w = rng.uniform(-1.3, 1.3, (3, 2, 2, 2))
    gy = rng.standard_normal(w.shape)
    grad = ops.scaled_poly_weight_backward(w, gy, scope)
    h = 1e-6
    for idx in np.ndindex(w.shape):
        wp, wm = w.copy(), w.copy()
        wp[idx] += h
        wm[idx] -= h
        fd = (np.sum(ops.scaled_poly_weight(wp, scope) * gy) - np.sum(ops.scaled_poly_weight(wm, scope) * gy)) / (2 * h)
        assert abs(fd - grad[idx]) < 1e-5


def test_batchnorm_train_forward(rng):
    x = rng.standard_normal((8, 3, 4, 4)) * 3 + 1
    bn = ops.BatchNormParams.create(3, np.float64)
    y, cache = ops.batchnorm_forward(x, bn, "train")
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=(0, 2, 3)), x.var(axis=(0, 2, 3)) / (x.var(axis=(0, 2, 3)) + 1e-5))
    ops.update_running_stats(bn, cache)
    m = 8 * 16
    np.testing.assert_allclose(bn.running_mean, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(bn.running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * m / (m - 1))


@pytest.mark.parametrize("mode", ["train", "eval"])
def test_batchnorm_backward_fd(mode, rng):
    x = rng.standard_normal((4, 2, 3, 3))
    bn = ops.BatchNormParams(rng.uniform(0.5, 2, 2), rng.standard_normal(2), rng.standard_normal(2), rng.uniform(0.5, 2, 2))
    gy = rng.standard_normal(x.shape)
    _, cache = ops.batchnorm_forward(x, bn, mode)
    gx, gg, gb = ops.batchnorm_backward(gy, cache, bn)
    f = lambda: float(np.sum(ops.batchnorm_forward(x, bn, mode)[0] * gy))
    h = 1e-6
    for arr, grad in ((x, gx), (bn.gamma, gg), (bn.beta, gb)):
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            up = f()
            arr[idx] = old - h
            dn = f()
            arr[idx] = old
            assert abs((up - dn) / (2 * h) - grad[idx]) < 1e-6


def test_batchnorm_rejects_bad_input():
    bn = ops.BatchNormParams.create(3)
    with pytest.raises(ValueError, match="channels"):
        ops.batchnorm_forward(np.zeros((1, 2, 1, 1)), bn)
    with pytest.raises(ValueError, match="mode"):
        ops.batchnorm_forward(np.zeros((1, 3, 1, 1)), bn, "bogus")


def test_sgd_momentum_recurrence():
    p = {"w": np.array([1.0, 2.0])}
    st_ = ops.SgdState(0.1, 0.9)
    g = np.array([1.0, -1.0])
    ops.sgd_step(p, {"w": g}, st_)
    np.testing.assert_allclose(p["w"], [0.9, 2.1])
    ops.sgd_step(p, {"w": g}, st_)
    # v = 0.9 * g + g
    np.testing.assert_allclose(p["w"], [0.9 - 0.19, 2.1 + 0.19])
