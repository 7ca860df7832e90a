"""Hot-loop kernels, compiled when available.

The Cython extension ``renalparse._kernels`` is used if it was built; otherwise
the numpy/scipy implementation in ``renalparse._fallback`` is used. Setting
``RENALPARSE_PURE_PYTHON=1`` forces the fallback.
"""

import os

import numpy as np

from renalparse import _fallback

try:
    if os.environ.get("RENALPARSE_PURE_PYTHON"):
        raise ImportError("pure-python backend requested")
    from renalparse import _kernels as _impl
    BACKEND = "cython"
except ImportError:
    _impl = _fallback
    BACKEND = "python"


def label_components(mask, connectivity=26):
    """Return ``(labels, sizes)``; labels numbered in raster order of first voxel."""
    mask = np.ascontiguousarray(mask, dtype=np.uint8)
    if mask.ndim != 3:
        raise ValueError(f"expected a 3D mask, got {mask.ndim}D")
    return _impl.label_components(mask, connectivity)


def min_distances(src, dst):
    """Distance from each point in ``src`` (n, 3) to its nearest point in ``dst`` (m, 3)."""
    src = np.ascontiguousarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.ascontiguousarray(dst, dtype=np.float64).reshape(-1, 3)
    return _impl.min_distances(src, dst)
