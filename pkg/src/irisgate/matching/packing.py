"""Bit packing of iris codes into 64-bit words.

Layout: the code planes are flattened to ``2 * radial_code`` rows of
``angular_res`` bits (plane-major, then radial row). Each row occupies
``ceil(angular_res / 64)`` little-endian uint64 words, angular index fastest,
bit ``j`` of a row stored at bit ``j % 64`` of word ``j // 64``. Padding
bits past ``angular_res`` are zero in both the code and the mask planes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..encoding import IrisCode

WORD = 64
_U64 = np.dtype("<u8")


def words_per_row(nbits: int) -> int:
    return -(-nbits // WORD)


def pack_rows(rows: np.ndarray) -> np.ndarray:
    """Pack a (..., nbits) boolean array into (..., words_per_row) uint64."""
    rows = np.asarray(rows, dtype=bool)
    nbits = rows.shape[-1]
    padded_bits = words_per_row(nbits) * WORD
    if padded_bits != nbits:
        pad = np.zeros(rows.shape[:-1] + (padded_bits - nbits,), dtype=bool)
        rows = np.concatenate([rows, pad], axis=-1)
    packed = np.packbits(rows, axis=-1, bitorder="little")
    return np.ascontiguousarray(packed).view(_U64).astype(np.uint64, copy=False)


def unpack_rows(words: np.ndarray, nbits: int) -> np.ndarray:
    words = np.ascontiguousarray(words, dtype=_U64)
    as_bytes = words.view(np.uint8)
    return np.unpackbits(as_bytes, axis=-1, count=nbits, bitorder="little").astype(bool)


@dataclass(frozen=True)
class PackedIrisCode:
    words: np.ndarray
    mask_words: np.ndarray
    radial_code: int
    angular_res: int

    @property
    def rows(self) -> int:
        return 2 * self.radial_code


def pack(code: IrisCode) -> PackedIrisCode:
    rows = code.bits.reshape(-1, code.angular_res)
    mask = code.mask_bits.reshape(-1, code.angular_res)
    return PackedIrisCode(pack_rows(rows), pack_rows(mask), code.radial_code, code.angular_res)


def unpack(packed: PackedIrisCode) -> IrisCode:
    shape = (2, packed.radial_code, packed.angular_res)
    bits = unpack_rows(packed.words, packed.angular_res).reshape(shape)
    mask = unpack_rows(packed.mask_words, packed.angular_res).reshape(shape)
    return IrisCode(bits, mask)


def repeated_rows(words: np.ndarray, nbits: int) -> np.ndarray:
    """Rows repeated end to end so any 64-bit circular window is a contiguous read.

    For a window starting at bit offset ``o < nbits`` the caller reads words
    ``o // 64`` and ``o // 64 + 1``; enough repetitions are stored to cover that.
    """
    bits = unpack_rows(words, nbits)
    reps = -(-(nbits + 2 * WORD) // nbits)
    return pack_rows(np.tile(bits, reps))
