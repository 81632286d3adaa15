# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels.  Same contracts as ``_kernels_py``."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def canonical_niches(occupied, int height_bits, int min_level):
    cdef cnp.uint8_t[::1] occ = np.ascontiguousarray(occupied, dtype=np.uint8)
    cdef Py_ssize_t units = occ.shape[0]
    cdef cnp.uint8_t[::1] free = np.empty(units, dtype=np.uint8)
    cdef cnp.uint8_t[::1] merged = np.empty(units // 2 + 1, dtype=np.uint8)
    cdef Py_ssize_t i, count = units
    cdef int level
    out = []
    for i in range(units):
        free[i] = 0 if occ[i] else 1
    for level in range(min_level, height_bits + 1):
        if level == height_bits:
            for i in range(count):
                if free[i]:
                    out.append((level, i))
            break
        for i in range(count // 2):
            merged[i] = free[2 * i] & free[2 * i + 1]
        for i in range(count):
            if free[i] and not merged[i >> 1]:
                out.append((level, i))
        for i in range(count // 2):
            free[i] = merged[i]
        count //= 2
    return out


cdef inline long long _bit_length(long long v):
    cdef long long n = 0
    while v:
        v >>= 1
        n += 1
    return n


def ledge_totals(long long max_size, int min_level, int max_pieces):
    cdef cnp.int64_t[::1] out = np.empty(max_size, dtype=np.int64)
    cdef long long size, rounded, rest, kept, top, unit = 1LL << min_level
    cdef int j
    for size in range(1, max_size + 1):
        rounded = (size + unit - 1) // unit * unit
        if max_pieces == 0:
            out[size - 1] = rounded
            continue
        kept = 0
        rest = rounded
        for j in range(max_pieces - 1):
            if rest == 0:
                break
            top = 1LL << (_bit_length(rest) - 1)
            kept += top
            rest -= top
        if rest > 0:
            kept += 1LL << _bit_length(rest - 1)
        out[size - 1] = kept
    return np.asarray(out)
