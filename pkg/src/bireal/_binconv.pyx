# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled XNOR-popcount convolution core."""

import numpy as np

cimport numpy as cnp
from libc.stdint cimport int32_t, uint8_t, uint64_t

cnp.import_array()


cdef extern from *:
    int popcount64 "__builtin_popcountll"(unsigned long long) nogil


def popcount_xnor(uint64_t a, uint64_t b):
    return popcount64(~(a ^ b))


def _pack_last(bits, nwords):
    """Pack the last axis of a 0/1 array into ``nwords`` u64 words, LSB first."""
    # no negative indexing here: the module is compiled with wraparound=False
    last = bits.ndim - 1
    padded = np.zeros(bits.shape[:last] + (nwords * 64,), dtype=np.uint8)
    padded[..., : bits.shape[last]] = bits
    return np.ascontiguousarray(np.packbits(padded, axis=-1, bitorder="little").view("<u8").astype(np.uint64))


def binconv_rows(const uint8_t[:, :, :, ::1] a_bits,
                 const uint64_t[:, ::1] w_rows,
                 int kh, int kw, int stride, int pad):
    """XNOR-popcount conv of unpacked input bits against row-packed weights.

    ``w_rows[o]`` holds filter o's bits in (c, kh, kw) order. Internally both
    operands are repacked channel-wise: one run of ``ceil(C/64)`` words per
    pixel and per kernel tap, so each tap costs a few word XNORs. Taps that
    fall on padding see an all-zero (all -1) input word.
    """
    cdef Py_ssize_t N = a_bits.shape[0], C = a_bits.shape[1]
    cdef Py_ssize_t H = a_bits.shape[2], W = a_bits.shape[3]
    cdef Py_ssize_t O = w_rows.shape[0]
    cdef Py_ssize_t nbits = C * kh * kw
    cdef Py_ssize_t Ho = (H + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - kw) // stride + 1
    cdef Py_ssize_t wpc = (C + 63) // 64
    cdef Py_ssize_t taps = kh * kw
    # channel-padding bits are 0 on both sides, XNOR to 1 on every tap
    cdef long long pad_bits = (wpc * 64 - C) * taps
    if w_rows.shape[1] * 64 < nbits:
        raise ValueError("w_rows too short for C*kh*kw bits")

    # (O, C*taps) bits -> (O, taps, C padded to words) -> words
    wbits = np.unpackbits(np.asarray(w_rows).view(np.uint8), axis=1, bitorder="little")[:, :nbits]
    wbits = wbits.reshape(O, C, taps).transpose(0, 2, 1)
    wt_arr = _pack_last(wbits, wpc).reshape(O, taps * wpc)
    # (N, C, H, W) bits -> (N, H, W, C padded to words) -> words
    ap_arr = _pack_last(np.asarray(a_bits).transpose(0, 2, 3, 1), wpc)
    out_arr = np.empty((N, O, Ho, Wo), dtype=np.int32)
    cdef const uint64_t[:, ::1] wt = wt_arr
    cdef const uint64_t[:, :, :, ::1] ap = ap_arr
    cdef int32_t[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t L = taps * wpc
    row_arr = np.zeros(L, dtype=np.uint64)
    cdef uint64_t[::1] row_mv = row_arr
    cdef uint64_t *row = &row_mv[0]
    cdef const uint64_t *wrow
    cdef const uint64_t *src
    cdef Py_ssize_t n, oh, ow, i, j, y, x, q, o, t, k
    cdef long long agree

    if N == 0 or O == 0 or Ho <= 0 or Wo <= 0:
        return out_arr
    with nogil:
        for n in range(N):
            for oh in range(Ho):
                for ow in range(Wo):
                    # receptive field as one contiguous word run; padding stays 0
                    for i in range(kh):
                        y = oh * stride - pad + i
                        for j in range(kw):
                            x = ow * stride - pad + j
                            t = (i * kw + j) * wpc
                            if 0 <= y < H and 0 <= x < W:
                                src = &ap[n, y, x, 0]
                                for q in range(wpc):
                                    row[t + q] = src[q]
                            else:
                                for q in range(wpc):
                                    row[t + q] = 0
                    for o in range(O):
                        wrow = &wt[o, 0]
                        agree = 0
                        for k in range(L):
                            agree += popcount64(~(row[k] ^ wrow[k]))
                        out[n, o, oh, ow] = <int32_t> (2 * (agree - pad_bits) - nbits)
    return out_arr
