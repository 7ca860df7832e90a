# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: 3D connected-component labelling and nearest-point distances."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()


def label_components(const cnp.uint8_t[:, :, ::1] mask, int connectivity=26):
    """Label foreground components by breadth-first flood fill.

    Labels are assigned 1..n in raster (C) order of each component's first
    voxel. Returns ``(labels int32 array, sizes int64 array of length n+1)``
    with ``sizes[0] == 0``.
    """
    if connectivity != 6 and connectivity != 26:
        raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")
    cdef Py_ssize_t nx = mask.shape[0], ny = mask.shape[1], nz = mask.shape[2]
    cdef Py_ssize_t total = nx * ny * nz
    labels_arr = np.zeros((nx, ny, nz), dtype=np.int32)
    cdef cnp.int32_t[:, :, ::1] labels = labels_arr
    queue_arr = np.empty(max(total, 1), dtype=np.int64)
    cdef cnp.int64_t[::1] queue = queue_arr

    offsets = [
        (dx, dy, dz)
        for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)
        if (dx, dy, dz) != (0, 0, 0)
        and (connectivity == 26 or abs(dx) + abs(dy) + abs(dz) == 1)
    ]
    off_arr = np.asarray(offsets, dtype=np.intp)
    cdef Py_ssize_t[:, ::1] off = off_arr
    cdef Py_ssize_t n_off = off_arr.shape[0]

    sizes = [0]
    cdef Py_ssize_t x, y, z, cx, cy, cz, qx, qy, qz, head, tail, o, lin
    cdef cnp.int32_t current = 0
    cdef Py_ssize_t count

    for x in range(nx):
        for y in range(ny):
            for z in range(nz):
                if mask[x, y, z] == 0 or labels[x, y, z] != 0:
                    continue
                current += 1
                labels[x, y, z] = current
                head = 0
                tail = 0
                queue[tail] = (x * ny + y) * nz + z
                tail += 1
                count = 0
                while head < tail:
                    lin = queue[head]
                    head += 1
                    count += 1
                    cz = lin % nz
                    cy = (lin // nz) % ny
                    cx = lin // (ny * nz)
                    for o in range(n_off):
                        qx = cx + off[o, 0]
                        qy = cy + off[o, 1]
                        qz = cz + off[o, 2]
                        if qx < 0 or qy < 0 or qz < 0 or qx >= nx or qy >= ny or qz >= nz:
                            continue
                        if mask[qx, qy, qz] != 0 and labels[qx, qy, qz] == 0:
                            labels[qx, qy, qz] = current
                            queue[tail] = (qx * ny + qy) * nz + qz
                            tail += 1
                sizes.append(count)
    return labels_arr, np.asarray(sizes, dtype=np.int64)


def min_distances(const double[:, ::1] src, const double[:, ::1] dst):
    """For every point of ``src``, the Euclidean distance to the closest point of ``dst``.

    Exact nearest neighbour: ``dst`` is sorted along x and the scan around each
    query stops once the x gap alone exceeds the best distance found.
    """
    cdef Py_ssize_t n = src.shape[0], m = dst.shape[0], i, j, lo, hi, mid
    if m == 0:
        raise ValueError("destination point set is empty")
    order = np.argsort(np.asarray(dst[:, 0]), kind="stable")
    cdef double[:, ::1] d_sorted = np.ascontiguousarray(np.asarray(dst)[order])
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef double best, d, ax, ay, az, dx, dy, dz
    for i in range(n):
        ax = src[i, 0]
        ay = src[i, 1]
        az = src[i, 2]
        # first index with x >= ax
        lo = 0
        hi = m
        while lo < hi:
            mid = (lo + hi) // 2
            if d_sorted[mid, 0] < ax:
                lo = mid + 1
            else:
                hi = mid
        best = 1e300
        j = lo
        while j < m:
            dx = ax - d_sorted[j, 0]
            if dx * dx >= best:
                break
            dy = ay - d_sorted[j, 1]
            dz = az - d_sorted[j, 2]
            d = dx * dx + dy * dy + dz * dz
            if d < best:
                best = d
            j += 1
        j = lo - 1
        while j >= 0:
            dx = ax - d_sorted[j, 0]
            if dx * dx >= best:
                break
            dy = ay - d_sorted[j, 1]
            dz = az - d_sorted[j, 2]
            d = dx * dx + dy * dy + dz * dz
            if d < best:
                best = d
            j -= 1
        out[i] = sqrt(best)
    return out_arr
