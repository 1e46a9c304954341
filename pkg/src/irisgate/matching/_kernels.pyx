# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled masked-Hamming kernel over packed iris codes."""

from libc.stdint cimport int64_t, uint64_t
from libc.stdlib cimport free, malloc


cdef extern from *:
    int __builtin_popcountll(unsigned long long x) nogil


cdef inline uint64_t _window(const uint64_t* d, Py_ssize_t off) noexcept nogil:
    cdef Py_ssize_t q = off >> 6
    cdef int b = off & 63
    if b == 0:
        return d[q]
    return (d[q] >> b) | (d[q + 1] << (64 - b))


def match_pairs(
    const uint64_t[:, :, ::1] a_words,
    const uint64_t[:, :, ::1] a_mask,
    const uint64_t[:, :, ::1] b_rep,
    const uint64_t[:, :, ::1] b_rep_mask,
    const int64_t[::1] ia,
    const int64_t[::1] ib,
    Py_ssize_t nbits,
    const int64_t[::1] shifts,
    int64_t min_overlap,
    int64_t[::1] out_disagree,
    int64_t[::1] out_overlap,
    int64_t[::1] out_shift,
    Py_ssize_t start,
    Py_ssize_t stop,
):
    """Rotation-minimized masked Hamming counts for pairs ``start:stop``.

    ``shifts`` is visited in order and a later shift must be strictly better
    to replace the incumbent, so ordering encodes the tie rule.
    """
    cdef Py_ssize_t p, si, row, k, off, s_mod
    cdef Py_ssize_t rows = a_words.shape[1]
    cdef Py_ssize_t nwords = a_words.shape[2]
    cdef Py_ssize_t rep_words = b_rep.shape[2]
    cdef Py_ssize_t nshift = shifts.shape[0]
    cdef int64_t s, dis, ovl, bd, bo, bs, cd, co, cbd, cbo
    cdef bint rel, best_rel
    cdef uint64_t m
    cdef const uint64_t* aw
    cdef const uint64_t* am
    cdef const uint64_t* bw
    cdef const uint64_t* bm
    if stop <= start:
        return
    cdef Py_ssize_t* offs = <Py_ssize_t*> malloc(nwords * sizeof(Py_ssize_t))
    if offs == NULL:
        raise MemoryError()
    with nogil:
        for p in range(start, stop):
            aw = &a_words[ia[p], 0, 0]
            am = &a_mask[ia[p], 0, 0]
            bw = &b_rep[ib[p], 0, 0]
            bm = &b_rep_mask[ib[p], 0, 0]
            best_rel = False
            bd = -1
            bo = 0
            bs = 0
            for si in range(nshift):
                s = shifts[si]
                s_mod = ((-s) % nbits + nbits) % nbits
                for k in range(nwords):
                    offs[k] = (k * 64 + s_mod) % nbits
                dis = 0
                ovl = 0
                for row in range(rows):
                    for k in range(nwords):
                        off = offs[k]
                        m = am[row * nwords + k] & _window(bm + row * rep_words, off)
                        dis += __builtin_popcountll((aw[row * nwords + k] ^ _window(bw + row * rep_words, off)) & m)
                        ovl += __builtin_popcountll(m)
                rel = ovl >= min_overlap
                if bd < 0:
                    bd = dis
                    bo = ovl
                    bs = s
                    best_rel = rel
                    continue
                if rel != best_rel:
                    if rel:
                        bd = dis
                        bo = ovl
                        bs = s
                        best_rel = True
                    continue
                # zero overlap compares as hd = 1
                cd = dis if ovl > 0 else 1
                co = ovl if ovl > 0 else 1
                cbd = bd if bo > 0 else 1
                cbo = bo if bo > 0 else 1
                if cd * cbo < cbd * co:
                    bd = dis
                    bo = ovl
                    bs = s
            out_disagree[p] = bd
            out_overlap[p] = bo
            out_shift[p] = bs
    free(offs)
