"""Bit-packed {-1, +1} tensors.

Real tensors are plain numpy arrays (N, C, H, W for activations,
O, I, Kh, Kw for weights). Binary tensors are packed 64 elements per
word, least-significant bit first, with bit 1 standing for +1 and bit 0
for -1. Trailing bits of the last word are always zero, so two
``BitTensor`` values are equal iff their words are equal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

WORD_BITS = 64


def n_words(numel: int) -> int:
    return (numel + WORD_BITS - 1) // WORD_BITS


@dataclass(frozen=True, eq=False)
class BitTensor:
    shape: tuple[int, ...]
    words: np.ndarray

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        words = np.ascontiguousarray(self.words, dtype=np.uint64)
        if words.ndim != 1 or words.size != n_words(int(np.prod(shape, dtype=np.int64))):
            raise ValueError(
                f"expected {n_words(int(np.prod(shape)))} words for shape {shape}, got {words.size}"
            )
        words.setflags(write=False)
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "words", words)
        tail = self.numel % WORD_BITS
        if tail and int(words[-1]) >> tail:
            raise ValueError("non-canonical BitTensor: trailing bits must be zero")

    @property
    def numel(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    def __eq__(self, other):
        if not isinstance(other, BitTensor):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.words, other.words)

    def __hash__(self):
        return hash((self.shape, self.words.tobytes()))

    def to_bytes(self) -> bytes:
        """Little-endian word stream."""
        return self.words.astype("<u8").tobytes()

    @classmethod
    def from_bytes(cls, shape, data: bytes) -> "BitTensor":
        words = np.frombuffer(data, dtype="<u8").astype(np.uint64)
        return cls(tuple(shape), words)

    def bits(self) -> np.ndarray:
        """Unpacked 0/1 array (uint8) with the tensor's shape."""
        raw = self.words.astype("<u8").view(np.uint8)
        flat = np.unpackbits(raw, bitorder="little", count=self.numel)
        return flat.reshape(self.shape)


def pack_bits(bits: np.ndarray) -> BitTensor:
    """Pack a 0/1 array into a canonical BitTensor of the same shape."""
    bits = np.asarray(bits)
    flat = bits.reshape(-1).astype(np.uint8, copy=False)
    nw = n_words(flat.size)
    padded = np.zeros(nw * WORD_BITS, dtype=np.uint8)
    padded[: flat.size] = flat
    words = np.packbits(padded, bitorder="little").view("<u8").astype(np.uint64)
    return BitTensor(bits.shape, words)


def sign_pack(x: np.ndarray) -> BitTensor:
    """Binarize with sign (0 maps to +1) and pack."""
    x = np.asarray(x)
    if not np.all(np.isfinite(x)):
        raise ValueError("sign_pack requires finite input")
    return pack_bits(x >= 0)


def unpack(b: BitTensor, dtype=np.float32) -> np.ndarray:
    return b.bits().astype(dtype) * 2 - 1


def sign(x: np.ndarray) -> np.ndarray:
    """Elementwise sign with sign(0) = +1, same dtype as ``x``."""
    x = np.asarray(x)
    return np.where(x >= 0, 1, -1).astype(x.dtype if x.dtype.kind == "f" else np.float32)


_M64 = (1 << 64) - 1


def popcount_xnor(a: int, b: int) -> int:
    """Number of bit positions where two 64-bit words agree."""
    return ((~(int(a) ^ int(b))) & _M64).bit_count()


def dot_pm1(a: BitTensor, b: BitTensor) -> int:
    """+-1 dot product of two equally shaped BitTensors via XNOR/popcount."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    agree = int(np.bitwise_count(~(a.words ^ b.words)).sum(dtype=np.int64))
    agree -= a.words.size * WORD_BITS - a.numel  # trailing zeros XNOR to 1
    return 2 * agree - a.numel
