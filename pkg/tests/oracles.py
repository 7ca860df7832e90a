"""Independent brute-force references used by the tests (no package code inside)."""

import itertools
import math
from collections import deque

import numpy as np


def count_dsc(p, g):
    p, g = np.asarray(p).ravel(), np.asarray(g).ravel()
    n_p = n_g = n_pg = 0
    for a, b in zip(p, g):
        n_p += bool(a)
        n_g += bool(b)
        n_pg += bool(a) and bool(b)
    return 1.0 if n_p + n_g == 0 else 2.0 * n_pg / (n_p + n_g)


def surface_points(mask, spacing):
    mask = np.asarray(mask) != 0
    nx, ny, nz = mask.shape
    pts = []
    for x, y, z in itertools.product(range(nx), range(ny), range(nz)):
        if not mask[x, y, z]:
            continue
        for dx, dy, dz in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
            qx, qy, qz = x + dx, y + dy, z + dz
            if not (0 <= qx < nx and 0 <= qy < ny and 0 <= qz < nz) or not mask[qx, qy, qz]:
                pts.append((x * spacing[0], y * spacing[1], z * spacing[2]))
                break
    return pts


def _nearest(a, pts):
    return min(math.dist(a, b) for b in pts)


def brute_hd_ahd(p, g, spacing):
    sp, sg = surface_points(p, spacing), surface_points(g, spacing)
    if not sp and not sg:
        return 0.0, 0.0
    if not sp or not sg:
        return None, None
    dp = [_nearest(a, sg) for a in sp]
    dg = [_nearest(b, sp) for b in sg]
    return max(max(dp), max(dg)), 0.5 * (math.fsum(dp) / len(dp) + math.fsum(dg) / len(dg))


def neighbour_offsets(connectivity):
    return [
        o
        for o in itertools.product((-1, 0, 1), repeat=3)
        if o != (0, 0, 0) and (connectivity == 26 or sum(map(abs, o)) == 1)
    ]


def flood_fill_largest(mask, connectivity):
    """Largest component by BFS; ties to the component found first in raster order."""
    mask = np.asarray(mask) != 0
    seen = np.zeros_like(mask)
    best = []
    offs = neighbour_offsets(connectivity)
    for start in itertools.product(*map(range, mask.shape)):
        if not mask[start] or seen[start]:
            continue
        comp, queue = [], deque([start])
        seen[start] = True
        while queue:
            v = queue.popleft()
            comp.append(v)
            for o in offs:
                q = tuple(a + b for a, b in zip(v, o))
                if all(0 <= c < n for c, n in zip(q, mask.shape)) and mask[q] and not seen[q]:
                    seen[q] = True
                    queue.append(q)
        if len(comp) > len(best):
            best = comp
    out = np.zeros_like(mask)
    for v in best:
        out[v] = True
    return out


def percentile_by_sort(values, q):
    """Linear interpolation between closest ranks: rank = q/100 * (n - 1)."""
    s = sorted(float(v) for v in np.asarray(values).ravel())
    rank = q / 100.0 * (len(s) - 1)
    lo = math.floor(rank)
    hi = min(lo + 1, len(s) - 1)
    return s[lo] + (rank - lo) * (s[hi] - s[lo])


def pooled_stats(cases):
    flat = []
    for image, labels in cases:
        flat.extend(np.asarray(image, dtype=np.float64)[np.asarray(labels) != 0].tolist())
    n = len(flat)
    mean = math.fsum(flat) / n
    return mean, math.sqrt(math.fsum((v - mean) ** 2 for v in flat) / n)
