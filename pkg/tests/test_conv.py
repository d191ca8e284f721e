import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bireal import kernels
from bireal.conv import (
    ConvGeometry,
    ShapeError,
    binconv2d,
    float_conv2d,
    float_conv2d_backward,
    maxpool2d,
    maxpool2d_backward,
)
from bireal.tensor import sign_pack, unpack

BACKENDS = ["numpy"] + (["cython"] if kernels.BACKEND == "cython" else [])


def naive_conv(a, w, stride, pad, pad_value):
    """Direct loop definition of cross-correlation."""
    n, c, h, wd = a.shape
    o, _, kh, kw = w.shape
    ap = np.full((n, c, h + 2 * pad, wd + 2 * pad), pad_value, dtype=np.float64)
    ap[:, :, pad : pad + h, pad : pad + wd] = a
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for i in range(ho):
        for j in range(wo):
            patch = ap[:, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
            out[:, :, i, j] = np.einsum("nchw,ochw->no", patch, w)
    return out


@st.composite
def conv_case(draw):
    k = draw(st.integers(1, 4))
    pad = draw(st.integers(0, 2))
    stride = draw(st.integers(1, 3))
    h = draw(st.integers(max(1, k - 2 * pad), 9))
    w = draw(st.integers(max(1, k - 2 * pad), 9))
    g = ConvGeometry(draw(st.integers(1, 12)), draw(st.integers(1, 6)), k, k, stride, pad)
    return g, (draw(st.integers(1, 3)), g.in_channels, h, w), draw(st.integers(0, 2**32 - 1))


@pytest.mark.parametrize("backend", BACKENDS)
@settings(max_examples=150, deadline=None)
@given(case=conv_case())
def test_binconv_matches_naive(backend, case):
    g, shape, seed = case
    r = np.random.default_rng(seed)
    a = sign_pack(r.standard_normal(shape))
    w = sign_pack(r.standard_normal(g.weight_shape))
    got = binconv2d(a, w, g, backend=backend)
    want = naive_conv(unpack(a, np.float64), unpack(w, np.float64), g.stride, g.padding, -1.0)
    assert got.dtype == np.int32
    np.testing.assert_array_equal(got, want.astype(np.int64))


def test_backends_agree_on_wide_channels(rng):
    # > 64 bits per receptive field spans several words with a ragged tail
    g = ConvGeometry.square(37, 5, 3, 2, 1)
    a = sign_pack(rng.standard_normal((2, 37, 7, 6)))
    w = sign_pack(rng.standard_normal(g.weight_shape))
    outs = [binconv2d(a, w, g, backend=b) for b in BACKENDS]
    ref = float_conv2d(unpack(a, np.float64), unpack(w, np.float64), g, pad_value=-1.0)
    for o in outs:
        np.testing.assert_array_equal(o, ref)


@settings(max_examples=40, deadline=None)
@given(case=conv_case(), pad_value=st.sampled_from([0.0, -1.0]))
def test_float_conv_matches_naive(case, pad_value):
    g, shape, seed = case
    r = np.random.default_rng(seed)
    a = r.standard_normal(shape)
    w = r.standard_normal(g.weight_shape)
    np.testing.assert_allclose(float_conv2d(a, w, g, pad_value), naive_conv(a, w, g.stride, g.padding, pad_value), atol=1e-10)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (3, 2)])
def test_float_conv_backward_fd(stride, pad, rng):
    g = ConvGeometry.square(3, 4, 3, stride, pad)
    a = rng.standard_normal((2, 3, 7, 6))
    w = rng.standard_normal(g.weight_shape)
    gy = rng.standard_normal(float_conv2d(a, w, g, -1.0).shape)
    ga, gw = float_conv2d_backward(gy, a, w, g, -1.0)
    f = lambda a_, w_: float(np.sum(float_conv2d(a_, w_, g, -1.0) * gy))
    h = 1e-6
    for arr, grad in ((a, ga), (w, gw)):
        for idx in list(np.ndindex(arr.shape))[::5]:
            old = arr[idx]
            arr[idx] = old + h
            up = f(a, w)
            arr[idx] = old - h
            dn = f(a, w)
            arr[idx] = old
            assert abs((up - dn) / (2 * h) - grad[idx]) < 1e-6


def test_shape_errors_name_axis(rng):
    g = ConvGeometry.square(3, 4, 3)
    a = sign_pack(rng.standard_normal((1, 3, 5, 5)))
    with pytest.raises(ShapeError, match="axis I"):
        binconv2d(a, sign_pack(rng.standard_normal((4, 2, 3, 3))), g)
    with pytest.raises(ShapeError, match="axis C"):
        binconv2d(sign_pack(rng.standard_normal((1, 2, 5, 5))), sign_pack(rng.standard_normal(g.weight_shape)), g)
    with pytest.raises(ShapeError, match="too small"):
        ConvGeometry.square(1, 1, 5).output_hw(3, 3)


def test_geometry_validation():
    with pytest.raises(ValueError):
        ConvGeometry.square(1, 1, 3, stride=0)
    with pytest.raises(ValueError):
        ConvGeometry.square(1, 1, 0)
    assert ConvGeometry.square(64, 64, 3, 2, 1).output_hw(56, 56) == (28, 28)


def test_maxpool_forward_backward(rng):
    x = rng.standard_normal((2, 3, 7, 7))
    out, idx = maxpool2d(x, 3, 2, 1)
    assert out.shape == (2, 3, 4, 4)
    assert out[0, 0, 1, 1] == x[0, 0, 1:4, 1:4].max()
    gy = rng.standard_normal(out.shape)
    gx = maxpool2d_backward(gy, x.shape, idx, 3, 2, 1)
    # the pool is linear around x with a fixed argmax, so <gy, pool(x)> has gradient gx
    np.testing.assert_allclose(np.sum(gx * x), np.sum(gy * out))
    assert np.isclose(gx.sum(), gy.sum())
