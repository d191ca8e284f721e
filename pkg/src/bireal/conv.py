"""Convolution: XNOR-popcount binary conv and the float reference path."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import kernels
from .tensor import BitTensor, pack_bits


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class ConvGeometry:
    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        for name in ("in_channels", "out_channels", "kernel_h", "kernel_w", "stride", "padding"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.kernel_h < 1 or self.kernel_w < 1:
            raise ValueError("kernel extents must be >= 1")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")

    @classmethod
    def square(cls, cin, cout, k, stride=1, padding=0):
        return cls(cin, cout, k, k, stride, padding)

    @property
    def fan_in(self) -> int:
        return self.in_channels * self.kernel_h * self.kernel_w

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, self.kernel_h, self.kernel_w)

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        ho = (h + 2 * self.padding - self.kernel_h) // self.stride + 1
        wo = (w + 2 * self.padding - self.kernel_w) // self.stride + 1
        if h + 2 * self.padding < self.kernel_h or w + 2 * self.padding < self.kernel_w:
            raise ShapeError(f"input {h}x{w} too small for kernel {self.kernel_h}x{self.kernel_w}")
        return ho, wo


def _check(a_shape, w_shape, g: ConvGeometry):
    if len(a_shape) != 4:
        raise ShapeError(f"input must be 4-D (N,C,H,W), got shape {tuple(a_shape)}")
    if tuple(w_shape) != g.weight_shape:
        for axis, got, want in zip(("O", "I", "Kh", "Kw"), w_shape, g.weight_shape):
            if got != want:
                raise ShapeError(f"weight axis {axis}: got {got}, geometry says {want}")
        raise ShapeError(f"weight shape {tuple(w_shape)} != {g.weight_shape}")
    if a_shape[1] != g.in_channels:
        raise ShapeError(f"input axis C: got {a_shape[1]}, geometry says {g.in_channels}")
    return g.output_hw(a_shape[2], a_shape[3])


def _pad(a, p, value):
    if not p:
        return a
    return np.pad(a, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=value)


def im2col(a, g: ConvGeometry, pad_value=0.0):
    """Receptive fields as an (N, C*Kh*Kw, Ho*Wo) array, (c, kh, kw) order."""
    n, c, h, w = a.shape
    ho, wo = g.output_hw(h, w)
    ap = _pad(a, g.padding, pad_value)
    s = g.stride
    cols = np.empty((n, c, g.kernel_h, g.kernel_w, ho, wo), dtype=a.dtype)
    for i in range(g.kernel_h):
        for j in range(g.kernel_w):
            cols[:, :, i, j] = ap[:, :, i : i + s * ho : s, j : j + s * wo : s]
    return cols.reshape(n, c * g.kernel_h * g.kernel_w, ho * wo)


def conv2d_cols(a, w, g: ConvGeometry, pad_value=0.0):
    """Forward conv that also returns the im2col buffer for the backward."""
    ho, wo = _check(a.shape, w.shape, g)
    cols = im2col(a, g, pad_value)
    out = np.matmul(w.reshape(g.out_channels, -1), cols)
    return out.reshape(a.shape[0], g.out_channels, ho, wo), cols


def float_conv2d(a, w, g: ConvGeometry, pad_value=0.0):
    """Cross-correlation with constant padding ``pad_value``."""
    return conv2d_cols(np.asarray(a), np.asarray(w), g, pad_value)[0]


def float_conv2d_backward(grad_out, a, w, g: ConvGeometry, pad_value=0.0, cols=None):
    """Gradients of ``float_conv2d`` w.r.t. input and weight.

    ``cols`` may carry the buffer returned by ``conv2d_cols``.
    """
    a = np.asarray(a)
    w = np.asarray(w)
    ho, wo = _check(a.shape, w.shape, g)
    n = a.shape[0]
    if grad_out.shape != (n, g.out_channels, ho, wo):
        raise ShapeError(f"grad_out shape {grad_out.shape} != {(n, g.out_channels, ho, wo)}")
    if cols is None:
        cols = im2col(a, g, pad_value)
    go = grad_out.reshape(n, g.out_channels, ho * wo)
    grad_w = np.tensordot(go, cols, axes=([0, 2], [0, 2])).reshape(g.weight_shape)

    gcols = np.matmul(w.reshape(g.out_channels, -1).T, go)
    gcols = gcols.reshape(n, g.in_channels, g.kernel_h, g.kernel_w, ho, wo)
    p, s = g.padding, g.stride
    gpad = np.zeros((n, g.in_channels, a.shape[2] + 2 * p, a.shape[3] + 2 * p), dtype=gcols.dtype)
    for i in range(g.kernel_h):
        for j in range(g.kernel_w):
            gpad[:, :, i : i + s * ho : s, j : j + s * wo : s] += gcols[:, :, i, j]
    grad_a = gpad[:, :, p : p + a.shape[2], p : p + a.shape[3]]
    return np.ascontiguousarray(grad_a), grad_w


def pack_weight_rows(w: BitTensor) -> np.ndarray:
    """Repack an (O, C, Kh, Kw) BitTensor so each output filter starts on a word."""
    bits = w.bits().reshape(w.shape[0], -1)
    nbits = bits.shape[1]
    nw = (nbits + 63) // 64
    padded = np.zeros((bits.shape[0], nw * 64), dtype=np.uint8)
    padded[:, :nbits] = bits
    return np.packbits(padded, axis=1, bitorder="little").view("<u8").astype(np.uint64)


def binconv2d(a: BitTensor, w: BitTensor, g: ConvGeometry, backend=None, w_rows=None):
    """1-bit convolution via XNOR + popcount; padding contributes -1.

    Returns an int32 array of shape (N, O, Ho, Wo). ``w_rows`` may carry
    a cached ``pack_weight_rows(w)``.
    """
    _check(a.shape, w.shape, g)
    impl = kernels if backend is None else kernels.get_backend(backend)
    if w_rows is None:
        w_rows = pack_weight_rows(w)
    return impl.binconv_rows(np.ascontiguousarray(a.bits()), w_rows, g.kernel_h, g.kernel_w, g.stride, g.padding)


def maxpool2d(x, k, stride, padding):
    """Max pooling with -inf padding; returns (out, argmax index into window)."""
    g = ConvGeometry(x.shape[1], x.shape[1], k, k, stride, padding)
    ho, wo = g.output_hw(x.shape[2], x.shape[3])
    xp = _pad(x, padding, -np.inf)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(*win.shape[:4], k * k)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx


def maxpool2d_backward(grad_out, x_shape, idx, k, stride, padding):
    n, c, h, w = x_shape
    ho, wo = grad_out.shape[2:]
    gpad = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=grad_out.dtype)
    di, dj = np.divmod(idx, k)
    rows = np.arange(ho)[None, None, :, None] * stride + di
    cols = np.arange(wo)[None, None, None, :] * stride + dj
    nn = np.arange(n)[:, None, None, None]
    cc = np.arange(c)[None, :, None, None]
    np.add.at(gpad, (nn, cc, rows, cols), grad_out)
    return gpad[:, :, padding : padding + h, padding : padding + w]


__all__ = [
    "ConvGeometry",
    "ShapeError",
    "binconv2d",
    "float_conv2d",
    "float_conv2d_backward",
    "conv2d_cols",
    "im2col",
    "maxpool2d",
    "maxpool2d_backward",
    "pack_bits",
    "pack_weight_rows",
]
