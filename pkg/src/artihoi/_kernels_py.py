"""Pure-numpy twins of the compiled kernels in ``_kernels.pyx``.

The grid search is replaced by chunked exhaustive search, which returns the
same (index, squared distance) pairs because both use the lowest-index tie rule
and the same x, y, z summation order.
"""
import numpy as np

_CHUNK = 1 << 22  # max query*ref pairs held in memory at once


def _sqdist(query, ref):
    d = query[:, None, :] - ref[None, :, :]
    sq = d * d
    return (sq[..., 0] + sq[..., 1]) + sq[..., 2]


def nearest_brute(query, ref):
    query = np.ascontiguousarray(query, dtype=np.float64)
    ref = np.ascontiguousarray(ref, dtype=np.float64)
    n, m = len(query), len(ref)
    idx = np.empty(n, dtype=np.int64)
    d2 = np.empty(n, dtype=np.float64)
    step = max(1, _CHUNK // max(m, 1))
    for s in range(0, n, step):
        block = _sqdist(query[s:s + step], ref)
        k = np.argmin(block, axis=1)  # first occurrence = lowest index
        idx[s:s + step] = k
        d2[s:s + step] = block[np.arange(len(k)), k]
    return idx, d2


def nearest_grid(query, ref, origin, h, dims, cell_start, cell_items):
    return nearest_brute(query, ref)


def ray_crossings(points, v0, e1, e2, direction, point_cell, cand_start, cand_items, eps):
    n = len(points)
    counts = np.zeros(n, dtype=np.int64)
    flags = np.zeros(n, dtype=np.uint8)
    point_cell = np.asarray(point_cell, dtype=np.int64)
    valid = np.flatnonzero(point_cell >= 0)
    if len(valid) == 0:
        return counts, flags
    cells = point_cell[valid]
    lens = cand_start[cells + 1] - cand_start[cells]
    pt = np.repeat(valid, lens)
    offs = np.arange(lens.sum()) - np.repeat(np.cumsum(lens) - lens, lens)
    tri = cand_items[np.repeat(cand_start[cells], lens) + offs]
    if len(tri) == 0:
        return counts, flags

    d = np.asarray(direction, dtype=np.float64)
    a1, a2 = e1[tri], e2[tri]
    pv = np.stack([d[1] * a2[:, 2] - d[2] * a2[:, 1],
                   d[2] * a2[:, 0] - d[0] * a2[:, 2],
                   d[0] * a2[:, 1] - d[1] * a2[:, 0]], axis=1)
    det = a1[:, 0] * pv[:, 0] + a1[:, 1] * pv[:, 1] + a1[:, 2] * pv[:, 2]
    ok = ~((det > -1e-300) & (det < 1e-300))
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    s = points[pt] - v0[tri]
    u = (s[:, 0] * pv[:, 0] + s[:, 1] * pv[:, 1] + s[:, 2] * pv[:, 2]) * inv
    q = np.stack([s[:, 1] * a1[:, 2] - s[:, 2] * a1[:, 1],
                  s[:, 2] * a1[:, 0] - s[:, 0] * a1[:, 2],
                  s[:, 0] * a1[:, 1] - s[:, 1] * a1[:, 0]], axis=1)
    v = (d[0] * q[:, 0] + d[1] * q[:, 1] + d[2] * q[:, 2]) * inv
    t = (a2[:, 0] * q[:, 0] + a2[:, 1] * q[:, 1] + a2[:, 2] * q[:, 2]) * inv
    w = 1.0 - u - v
    cand = ok & (u >= -eps) & (u <= 1.0 + eps) & (v >= -eps) & (u + v <= 1.0 + eps) & (t >= -eps)
    degen = cand & ((t <= eps) | (u <= eps) | (v <= eps) | (w <= eps))
    hit = cand & ~degen
    np.add.at(counts, pt[hit], 1)
    flags[np.unique(pt[degen])] = 1
    return counts, flags
