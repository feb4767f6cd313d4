# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops: exact nearest-neighbour search and ray/triangle parity.

Both functions mirror ``_kernels_py`` exactly; squared distances are summed in
x, y, z order so that ties resolve identically across backends.
"""
import numpy as np

from libc.math cimport floor, INFINITY


cdef inline double _d2(const double[:, ::1] a, Py_ssize_t i,
                       const double[:, ::1] b, Py_ssize_t j) noexcept nogil:
    cdef double dx = a[i, 0] - b[j, 0]
    cdef double dy = a[i, 1] - b[j, 1]
    cdef double dz = a[i, 2] - b[j, 2]
    return dx * dx + dy * dy + dz * dz


def nearest_brute(const double[:, ::1] query, const double[:, ::1] ref):
    cdef Py_ssize_t n = query.shape[0], m = ref.shape[0], i, j, bi
    cdef double best, d
    out_idx = np.empty(n, dtype=np.int64)
    out_d2 = np.empty(n, dtype=np.float64)
    cdef long long[::1] oi = out_idx
    cdef double[::1] od = out_d2
    with nogil:
        for i in range(n):
            best = INFINITY
            bi = -1
            for j in range(m):
                d = _d2(query, i, ref, j)
                if d < best:
                    best = d
                    bi = j
            oi[i] = bi
            od[i] = best
    return out_idx, out_d2


cdef inline Py_ssize_t _cell_of(double x, double o, double h, Py_ssize_t n) noexcept nogil:
    cdef double f = floor((x - o) / h)
    if f < 0:
        return 0
    if f > n - 1:
        return n - 1
    return <Py_ssize_t>f


def nearest_grid(const double[:, ::1] query, const double[:, ::1] ref,
                 const double[::1] origin, double h, const long long[::1] dims,
                 const long long[::1] cell_start, const long long[::1] cell_items):
    """Ring search on a uniform grid; stops once no unvisited cell can win."""
    cdef Py_ssize_t n = query.shape[0]
    cdef Py_ssize_t nx = dims[0], ny = dims[1], nz = dims[2]
    cdef Py_ssize_t i, r, ci, cj, ck, a, b, c, lo_c, hi_c, step_c, p, j, bi, cell
    cdef Py_ssize_t rmax = nx
    cdef double best, d, bound, gap
    cdef double qx, qy, qz
    cdef bint edge_ab
    if ny > rmax:
        rmax = ny
    if nz > rmax:
        rmax = nz
    out_idx = np.empty(n, dtype=np.int64)
    out_d2 = np.empty(n, dtype=np.float64)
    cdef long long[::1] oi = out_idx
    cdef double[::1] od = out_d2
    with nogil:
        for i in range(n):
            qx = query[i, 0]
            qy = query[i, 1]
            qz = query[i, 2]
            ci = _cell_of(qx, origin[0], h, nx)
            cj = _cell_of(qy, origin[1], h, ny)
            ck = _cell_of(qz, origin[2], h, nz)
            best = INFINITY
            bi = -1
            r = 0
            while r <= rmax:
                for a in range(ci - r, ci + r + 1):
                    if a < 0 or a >= nx:
                        continue
                    for b in range(cj - r, cj + r + 1):
                        if b < 0 or b >= ny:
                            continue
                        edge_ab = (a == ci - r or a == ci + r or b == cj - r or b == cj + r)
                        if edge_ab:
                            lo_c = ck - r
                            hi_c = ck + r
                            step_c = 1
                        else:
                            lo_c = ck - r
                            hi_c = ck + r
                            step_c = 2 * r if r > 0 else 1
                        c = lo_c
                        while c <= hi_c:
                            if 0 <= c < nz:
                                cell = (a * ny + b) * nz + c
                                for p in range(cell_start[cell], cell_start[cell + 1]):
                                    j = cell_items[p]
                                    d = _d2(query, i, ref, j)
                                    if d < best or (d == best and j < bi):
                                        best = d
                                        bi = j
                            c += step_c
                # distance from q to the nearest unvisited cell
                bound = INFINITY
                if ci - r > 0:
                    gap = qx - (origin[0] + (ci - r) * h)
                    if gap < bound:
                        bound = gap
                if ci + r < nx - 1:
                    gap = origin[0] + (ci + r + 1) * h - qx
                    if gap < bound:
                        bound = gap
                if cj - r > 0:
                    gap = qy - (origin[1] + (cj - r) * h)
                    if gap < bound:
                        bound = gap
                if cj + r < ny - 1:
                    gap = origin[1] + (cj + r + 1) * h - qy
                    if gap < bound:
                        bound = gap
                if ck - r > 0:
                    gap = qz - (origin[2] + (ck - r) * h)
                    if gap < bound:
                        bound = gap
                if ck + r < nz - 1:
                    gap = origin[2] + (ck + r + 1) * h - qz
                    if gap < bound:
                        bound = gap
                if bound == INFINITY:
                    break
                if bound > 0:
                    bound = bound * (1.0 - 1e-9) - 1e-12
                    if bound > 0 and best < bound * bound:
                        break
                r += 1
            oi[i] = bi
            od[i] = best
    return out_idx, out_d2


def ray_crossings(const double[:, ::1] points, const double[:, ::1] v0,
                  const double[:, ::1] e1, const double[:, ::1] e2,
                  const double[::1] direction, const long long[::1] point_cell,
                  const long long[::1] cand_start, const long long[::1] cand_items,
                  double eps):
    """Count forward ray hits per point; flag edge, vertex and on-surface hits."""
    cdef Py_ssize_t n = points.shape[0], i, p, t, cell
    cdef double dx = direction[0], dy = direction[1], dz = direction[2]
    cdef double px, py, pz, qx, qy, qz, sx, sy, sz, det, inv, u, v, w, tt
    cdef int cnt
    cdef bint degen
    counts = np.zeros(n, dtype=np.int64)
    flags = np.zeros(n, dtype=np.uint8)
    cdef long long[::1] oc = counts
    cdef unsigned char[::1] of = flags
    with nogil:
        for i in range(n):
            cell = point_cell[i]
            if cell < 0:
                continue
            cnt = 0
            degen = False
            for p in range(cand_start[cell], cand_start[cell + 1]):
                t = cand_items[p]
                # p = d x e2
                px = dy * e2[t, 2] - dz * e2[t, 1]
                py = dz * e2[t, 0] - dx * e2[t, 2]
                pz = dx * e2[t, 1] - dy * e2[t, 0]
                det = e1[t, 0] * px + e1[t, 1] * py + e1[t, 2] * pz
                if det > -1e-300 and det < 1e-300:
                    continue
                inv = 1.0 / det
                sx = points[i, 0] - v0[t, 0]
                sy = points[i, 1] - v0[t, 1]
                sz = points[i, 2] - v0[t, 2]
                u = (sx * px + sy * py + sz * pz) * inv
                if u < -eps or u > 1.0 + eps:
                    continue
                # q = s x e1
                qx = sy * e1[t, 2] - sz * e1[t, 1]
                qy = sz * e1[t, 0] - sx * e1[t, 2]
                qz = sx * e1[t, 1] - sy * e1[t, 0]
                v = (dx * qx + dy * qy + dz * qz) * inv
                if v < -eps or u + v > 1.0 + eps:
                    continue
                tt = (e2[t, 0] * qx + e2[t, 1] * qy + e2[t, 2] * qz) * inv
                w = 1.0 - u - v
                if tt < -eps:
                    continue
                if tt <= eps or u <= eps or v <= eps or w <= eps:
                    degen = True
                    continue
                cnt += 1
            oc[i] = cnt
            of[i] = degen
    return counts, flags
