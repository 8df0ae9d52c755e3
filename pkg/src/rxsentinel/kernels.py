"""Kernel backend selection: compiled extension when built, numpy fallback otherwise.

Set RXSENTINEL_PURE_PYTHON=1 to force the fallback (used by the benchmark and
by the tests that compare both backends).
"""
import os

import numpy as np

from . import _kernels_py

if os.environ.get("RXSENTINEL_PURE_PYTHON"):
    _backend = _kernels_py
else:
    try:
        from . import _kernels as _backend  # type: ignore[attr-defined]
    except ImportError:
        _backend = _kernels_py

BACKEND = _backend.BACKEND


def tree_path_lengths(x, feature, threshold, left, right, adjust, roots):
    return _backend.tree_path_lengths(
        np.ascontiguousarray(x, dtype=np.float64),
        feature, threshold, left, right, adjust, roots,
    )
