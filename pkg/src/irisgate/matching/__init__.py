"""Masked fractional Hamming distance with rotation minimization.

The distance between two codes is the fraction of mutually valid bits that
disagree. Rotation minimization slides code ``b`` (and its mask) along the
angular axis: a shift of ``s`` compares ``a`` against ``b`` rolled by ``s``
positions, so if ``b`` is ``a`` rolled by ``+3`` the best shift is ``-3``.
Ties go to the smallest ``|s|``, then to the negative shift. Shifts whose
overlap falls below ``min_overlap`` are only chosen when no shift reaches it,
in which case the result is flagged unreliable.

The hot loop comes from a compiled extension when it is built; otherwise a
NumPy implementation is used. Set ``IRISGATE_BACKEND=numpy`` to force the
fallback.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _fallback
from .packing import PackedIrisCode, pack, repeated_rows, unpack

try:
    from . import _kernels
except ImportError:  # extension not built
    _kernels = None

BACKENDS = {"numpy": _fallback}
if _kernels is not None:
    BACKENDS["cython"] = _kernels

if os.environ.get("IRISGATE_BACKEND", "").lower() == "numpy" or _kernels is None:
    BACKEND = "numpy"
else:
    BACKEND = "cython"

DEFAULT_MAX_SHIFT = 8
DEFAULT_MIN_OVERLAP = 1024

__all__ = [
    "BACKEND",
    "BACKENDS",
    "CodeBank",
    "MatchResult",
    "PackedIrisCode",
    "batch_match",
    "fractional_hd",
    "pack",
    "rotation_min_hd",
    "shift_order",
    "unpack",
]


@dataclass(frozen=True)
class MatchResult:
    hd: float
    shift: int
    overlap_bits: int
    reliable: bool

    @property
    def flags(self) -> str:
        return "" if self.reliable else "Unreliable"


def shift_order(max_shift: int) -> np.ndarray:
    """0, -1, +1, -2, +2, ... : the visiting order that encodes the tie rule."""
    order = [0]
    for s in range(1, max_shift + 1):
        order += [-s, s]
    return np.array(order, dtype=np.int64)


def _fraction(disagree: np.ndarray, overlap: np.ndarray) -> np.ndarray:
    disagree = np.asarray(disagree, dtype=np.float64)
    overlap = np.asarray(overlap, dtype=np.float64)
    out = np.ones_like(disagree)
    np.divide(disagree, overlap, out=out, where=overlap > 0)
    return out


class CodeBank:
    """A stack of packed codes sharing one geometry, prepared for batch matching."""

    def __init__(self, codes: Sequence[PackedIrisCode]):
        if not codes:
            raise ValueError("empty code bank")
        first = codes[0]
        for c in codes:
            if (c.radial_code, c.angular_res) != (first.radial_code, first.angular_res):
                raise ValueError("all codes in a bank must share dimensions")
        self.radial_code = first.radial_code
        self.angular_res = first.angular_res
        self.words = np.ascontiguousarray(np.stack([c.words for c in codes]), dtype=np.uint64)
        self.mask = np.ascontiguousarray(np.stack([c.mask_words for c in codes]), dtype=np.uint64)
        self.rep = np.ascontiguousarray(
            np.stack([repeated_rows(c.words, self.angular_res) for c in codes]), dtype=np.uint64
        )
        self.rep_mask = np.ascontiguousarray(
            np.stack([repeated_rows(c.mask_words, self.angular_res) for c in codes]), dtype=np.uint64
        )

    def __len__(self) -> int:
        return self.words.shape[0]

    def match(self, ia, ib, max_shift=DEFAULT_MAX_SHIFT, min_overlap=DEFAULT_MIN_OVERLAP,
              backend=None, workers=1):
        """Match codes ``ia[k]`` (unshifted) against ``ib[k]`` (shifted).

        Returns a dict of arrays: ``hd``, ``shift``, ``overlap_bits``, ``reliable``.
        Each pair writes into its own output slot, so results do not depend
        on how the work is split across workers.
        """
        if max_shift < 0 or 2 * max_shift >= self.angular_res:
            raise ValueError(f"max_shift must lie in [0, {self.angular_res / 2})")
        ia = np.ascontiguousarray(ia, dtype=np.int64)
        ib = np.ascontiguousarray(ib, dtype=np.int64)
        if ia.shape != ib.shape:
            raise ValueError("index arrays differ in length")
        n = ia.size
        kernel = BACKENDS[backend or BACKEND]
        dis = np.zeros(n, dtype=np.int64)
        ovl = np.zeros(n, dtype=np.int64)
        sh = np.zeros(n, dtype=np.int64)
        args = (self.words, self.mask, self.rep, self.rep_mask, ia, ib, self.angular_res,
                shift_order(max_shift), int(min_overlap), dis, ovl, sh)
        if workers > 1 and n > 1:
            bounds = np.linspace(0, n, workers + 1).astype(int)
            with ThreadPoolExecutor(workers) as pool:
                list(pool.map(lambda k: kernel.match_pairs(*args, bounds[k], bounds[k + 1]), range(workers)))
        elif n:
            kernel.match_pairs(*args, 0, n)
        return {
            "hd": _fraction(dis, ovl),
            "shift": sh,
            "overlap_bits": ovl,
            "reliable": ovl >= min_overlap,
            "disagree": dis,
        }


def _results(out) -> list[MatchResult]:
    return [
        MatchResult(float(h), int(s), int(o), bool(r))
        for h, s, o, r in zip(out["hd"], out["shift"], out["overlap_bits"], out["reliable"])
    ]


def rotation_min_hd(a: PackedIrisCode, b: PackedIrisCode, max_shift=DEFAULT_MAX_SHIFT,
                    min_overlap=DEFAULT_MIN_OVERLAP, backend=None) -> MatchResult:
    bank = CodeBank([a, b])
    return _results(bank.match([0], [1], max_shift, min_overlap, backend))[0]


def fractional_hd(a: PackedIrisCode, b: PackedIrisCode, min_overlap=DEFAULT_MIN_OVERLAP,
                  backend=None) -> MatchResult:
    return rotation_min_hd(a, b, 0, min_overlap, backend)


def batch_match(pairs, max_shift=DEFAULT_MAX_SHIFT, min_overlap=DEFAULT_MIN_OVERLAP,
                backend=None, workers=1) -> list[MatchResult]:
    """Rotation-minimized match of each ``(a, b)`` pair, in input order."""
    pairs = list(pairs)
    if not pairs:
        return []
    index: dict[int, int] = {}
    codes = []
    ia, ib = [], []
    for a, b in pairs:
        for code, dest in ((a, ia), (b, ib)):
            key = id(code)
            if key not in index:
                index[key] = len(codes)
                codes.append(code)
            dest.append(index[key])
    bank = CodeBank(codes)
    return _results(bank.match(ia, ib, max_shift, min_overlap, backend, workers))
