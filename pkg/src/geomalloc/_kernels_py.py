"""Fallback kernels (numpy).  Same contracts as ``_ckernels``."""

import numpy as np


def canonical_niches(occupied, height_bits, min_level):
    """Maximal self-aligned free blocks of an occupancy map.

    ``occupied`` holds one flag per min-level unit.  Returns a list of
    ``(level, index)`` pairs, level ascending.
    """
    free = np.logical_not(np.asarray(occupied, dtype=bool))
    out = []
    for level in range(min_level, height_bits + 1):
        if level == height_bits:
            merged = None
            mask = free
        else:
            merged = free[0::2] & free[1::2]
            mask = free & ~np.repeat(merged, 2)
        out.extend((level, int(i)) for i in np.flatnonzero(mask))
        if merged is None:
            break
        free = merged
    return out


def _bit_length(values):
    _, exp = np.frexp(values.astype(np.float64))
    return np.where(values > 0, exp, 0).astype(np.int64)


def ledge_totals(max_size, min_level, max_pieces):
    """Bytes reserved by the ledge plan of every size in ``[1, max_size]``.

    ``max_pieces`` of 0 means unbounded.  Index ``i`` holds size ``i + 1``.
    """
    sizes = np.arange(1, max_size + 1, dtype=np.int64)
    unit = 1 << min_level
    rounded = (sizes + unit - 1) // unit * unit
    if max_pieces == 0:
        return rounded
    kept = np.zeros_like(rounded)
    rest = rounded.copy()
    for _ in range(max_pieces - 1):
        top = np.where(rest > 0, np.left_shift(1, np.maximum(_bit_length(rest) - 1, 0)), 0)
        kept += top
        rest -= top
    tail = np.where(rest > 0, np.left_shift(1, _bit_length(rest - 1)), 0)
    return kept + tail
