"""Pure numpy fallback for the compiled XNOR-popcount kernel.

Same signatures and bit-identical results as ``bireal._binconv``.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_M64 = (1 << 64) - 1

# bound on (positions * out_channels * words) materialized per chunk
_CHUNK_ELEMS = 1 << 22


def popcount_xnor(a, b):
    return ((~(int(a) ^ int(b))) & _M64).bit_count()


def binconv_rows(a_bits, w_rows, kh, kw, stride, pad):
    a_bits = np.asarray(a_bits, dtype=np.uint8)
    w_rows = np.asarray(w_rows, dtype=np.uint64)
    N, C, H, W = a_bits.shape
    O, nw = w_rows.shape
    nbits = C * kh * kw
    pad_bits = nw * 64 - nbits
    if pad:
        a_bits = np.pad(a_bits, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(a_bits, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    Ho, Wo = win.shape[2], win.shape[3]
    # (N, Ho, Wo, C, kh, kw) -> one bit row per output position
    rows = win.transpose(0, 2, 3, 1, 4, 5).reshape(N * Ho * Wo, nbits)
    out = np.empty((N * Ho * Wo, O), dtype=np.int32)
    step = max(1, _CHUNK_ELEMS // max(1, O * nw))
    for s in range(0, rows.shape[0], step):
        chunk = rows[s : s + step]
        padded = np.zeros((chunk.shape[0], nw * 64), dtype=np.uint8)
        padded[:, :nbits] = chunk
        words = np.packbits(padded, axis=1, bitorder="little").view("<u8").astype(np.uint64)
        agree = np.bitwise_count(~(words[:, None, :] ^ w_rows[None, :, :])).sum(axis=2, dtype=np.int64)
        out[s : s + step] = 2 * (agree - pad_bits) - nbits
    return np.ascontiguousarray(out.reshape(N, Ho, Wo, O).transpose(0, 3, 1, 2))
