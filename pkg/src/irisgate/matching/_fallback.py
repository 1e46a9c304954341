"""Pure NumPy implementation of the packed matching kernel.

Same contract as the compiled ``match_pairs``: integer disagreement and
overlap counts per pair, first strictly-better shift wins.
"""

from __future__ import annotations

import numpy as np

_CHUNK = 512


def _windows(rep: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Gather 64-bit windows. rep: (P, rows, D); offsets: (S, W) -> (P, S, rows, W)."""
    q = offsets >> 6
    b = (offsets & 63).astype(np.uint64)
    lo = rep[..., q].transpose(0, 2, 1, 3)
    hi = rep[..., q + 1].transpose(0, 2, 1, 3)
    bb = b[None, :, None, :]
    with np.errstate(over="ignore"):
        shifted_hi = np.where(bb == 0, np.uint64(0), hi << ((np.uint64(64) - bb) % np.uint64(64)))
    return (lo >> bb) | shifted_hi


def match_pairs(a_words, a_mask, b_rep, b_rep_mask, ia, ib, nbits, shifts, min_overlap,
                out_disagree, out_overlap, out_shift, start, stop):
    shifts = np.asarray(shifts, dtype=np.int64)
    nwords = a_words.shape[2]
    offsets = (np.arange(nwords, dtype=np.int64)[None, :] * 64 - shifts[:, None]) % nbits
    for lo in range(start, stop, _CHUNK):
        hi = min(stop, lo + _CHUNK)
        sel_a = ia[lo:hi]
        sel_b = ib[lo:hi]
        aw = a_words[sel_a][:, None]  # (P, 1, rows, W)
        am = a_mask[sel_a][:, None]
        bw = _windows(b_rep[sel_b], offsets)
        bm = _windows(b_rep_mask[sel_b], offsets)
        m = am & bm
        dis = np.bitwise_count((aw ^ bw) & m).sum(axis=(2, 3), dtype=np.int64)  # (P, S)
        ovl = np.bitwise_count(m).sum(axis=(2, 3), dtype=np.int64)
        d, o, s = _select(dis, ovl, shifts, min_overlap)
        out_disagree[lo:hi] = d
        out_overlap[lo:hi] = o
        out_shift[lo:hi] = s


def _select(dis, ovl, shifts, min_overlap):
    n = dis.shape[0]
    best_d = dis[:, 0].copy()
    best_o = ovl[:, 0].copy()
    best_s = np.full(n, shifts[0], dtype=np.int64)
    best_rel = best_o >= min_overlap
    for si in range(1, len(shifts)):
        d, o = dis[:, si], ovl[:, si]
        rel = o >= min_overlap
        cd, co = np.where(o > 0, d, 1), np.where(o > 0, o, 1)
        cbd, cbo = np.where(best_o > 0, best_d, 1), np.where(best_o > 0, best_o, 1)
        better = (rel & ~best_rel) | ((rel == best_rel) & (cd * cbo < cbd * co))
        best_d = np.where(better, d, best_d)
        best_o = np.where(better, o, best_o)
        best_s = np.where(better, shifts[si], best_s)
        best_rel = best_rel | rel
    return best_d, best_o, best_s
