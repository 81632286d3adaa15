"""Kernel selection: the compiled extension when built, numpy otherwise.

Set ``GEOMALLOC_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _kernels_py

BACKEND = "python"
canonical_niches = _kernels_py.canonical_niches
ledge_totals = _kernels_py.ledge_totals

if not os.environ.get("GEOMALLOC_PURE_PYTHON"):
    try:
        from . import _ckernels
    except ImportError:
        pass
    else:
        BACKEND = "cython"
        canonical_niches = _ckernels.canonical_niches
        ledge_totals = _ckernels.ledge_totals

__all__ = ["BACKEND", "canonical_niches", "ledge_totals"]
