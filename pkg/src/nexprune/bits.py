"""Bit-packed activation patterns and XOR+popcount Hamming kernels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

WORD_BITS = 64


def n_words(n_bits: int) -> int:
    return (n_bits + WORD_BITS - 1) // WORD_BITS


def pack_bits(bits: np.ndarray) -> np.ndarray:
    """Pack booleans along the last axis into little-endian uint64 words.

    Bit ``j`` of a pattern lands in word ``j // 64`` at position ``j % 64``;
    unused trailing bits of the last word are zero.
    """
    bits = np.asarray(bits, dtype=bool)
    p = bits.shape[-1]
    nbytes = n_words(p) * 8
    packed = np.packbits(bits, axis=-1, bitorder="little")
    if packed.shape[-1] != nbytes:
        pad = [(0, 0)] * (packed.ndim - 1) + [(0, nbytes - packed.shape[-1])]
        packed = np.pad(packed, pad)
    return np.ascontiguousarray(packed).view("<u8")


def unpack_bits(words: np.ndarray, n_bits: int) -> np.ndarray:
    words = np.ascontiguousarray(words, dtype="<u8")
    raw = np.unpackbits(words.view(np.uint8), axis=-1, bitorder="little")
    return raw[..., :n_bits].astype(bool)


@dataclass(frozen=True)
class PatternSet:
    """Binarized activation patterns of one filter over a batch.

    ``words`` has shape ``(N, n_words(P))``; row ``i`` is sample ``i``.
    """

    words: np.ndarray
    n_bits: int
    layer: str = ""
    filter_index: int = -1

    @property
    def n_samples(self) -> int:
        return self.words.shape[0]

    def unpack(self) -> np.ndarray:
        return unpack_bits(self.words, self.n_bits)


def binarize(activation: np.ndarray) -> np.ndarray:
    """Bit-pack ``activation > 0`` over all non-leading axes.

    ``(N, P...)`` gives ``(N, W)``; an ``(N, C, H, W)`` map batch gives
    per-filter patterns of shape ``(C, N, W)``.
    """
    a = np.asarray(activation)
    if a.ndim == 4:
        n, c = a.shape[:2]
        bits = (a > 0).reshape(n, c, -1).transpose(1, 0, 2)
        return pack_bits(bits)
    return pack_bits((a > 0).reshape(a.shape[0], -1))


def hamming(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Popcount of ``a XOR b`` summed over the last (word) axis; broadcasts."""
    return np.bitwise_count(np.bitwise_xor(a, b)).sum(axis=-1, dtype=np.int64)


def pairwise_dissimilarity(a: np.ndarray, b: np.ndarray, n_bits: int) -> float:
    """Normalized Hamming distance of two packed patterns of ``n_bits`` bits."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape or a.shape[-1] != n_words(n_bits) or n_bits < 1:
        raise ValueError(f"pattern shapes {a.shape} and {b.shape} do not match {n_bits} bits")
    return float(hamming(a, b)) / n_bits


def upper_triangle_total(words: np.ndarray) -> np.ndarray:
    """Sum of Hamming distances over all sample pairs ``i < j``.

    ``words`` is ``(..., N, W)``; streams one row of the pair matrix at a
    time so memory stays O(N*W).  Exact integer result per leading index.
    """
    n = words.shape[-2]
    total = np.zeros(words.shape[:-2], dtype=np.int64)
    for i in range(n - 1):
        total += hamming(words[..., i:i + 1, :], words[..., i + 1:, :]).sum(axis=-1)
    return total


def column_count_total(words: np.ndarray, n_bits: int) -> np.ndarray:
    """Same quantity as :func:`upper_triangle_total` via per-bit counts.

    Each bit position with ``c`` ones among ``N`` samples differs in exactly
    ``c * (N - c)`` pairs; the result is identical, in O(N*P) time.
    """
    n = words.shape[-2]
    bits = unpack_bits(words, n_bits)
    ones = bits.sum(axis=-2, dtype=np.int64)
    return (ones * (n - ones)).sum(axis=-1)


def pair_distances(words: np.ndarray) -> np.ndarray:
    """All upper-triangle distances, ``(..., N*(N-1)/2)``, row-major order."""
    n = words.shape[-2]
    parts = [hamming(words[..., i:i + 1, :], words[..., i + 1:, :]) for i in range(n - 1)]
    return np.concatenate(parts, axis=-1)
