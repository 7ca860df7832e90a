"""Pure numpy/scipy versions of the compiled kernels, same contracts."""

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree


def label_components(mask, connectivity=26):
    if connectivity not in (6, 26):
        raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")
    rank = 1 if connectivity == 6 else 3
    structure = ndimage.generate_binary_structure(3, rank)
    raw, n = ndimage.label(np.asarray(mask) != 0, structure=structure)
    if n == 0:
        return raw.astype(np.int32), np.zeros(1, dtype=np.int64)
    # renumber by raster order of each component's first voxel
    flat = raw.ravel()
    ids, first = np.unique(flat, return_index=True)
    fg = ids != 0
    order = np.argsort(first[fg], kind="stable")
    remap = np.zeros(n + 1, dtype=np.int32)
    remap[ids[fg][order]] = np.arange(1, n + 1, dtype=np.int32)
    labels = remap[raw]
    sizes = np.bincount(labels.ravel(), minlength=n + 1).astype(np.int64)
    sizes[0] = 0
    return labels, sizes


def min_distances(src, dst):
    dst = np.asarray(dst, dtype=np.float64)
    if len(dst) == 0:
        raise ValueError("destination point set is empty")
    dist, _ = cKDTree(dst).query(np.asarray(src, dtype=np.float64), k=1)
    return np.asarray(dist, dtype=np.float64)
