"""Watertight triangle-mesh primitives used by the synthetic object families."""
import numpy as np


def _weld(vertices, faces, tol=1e-9):
    key = np.round(vertices / tol).astype(np.int64)
    _, first, inv = np.unique(key, axis=0, return_index=True, return_inverse=True)
    order = np.argsort(first)
    remap = np.empty_like(order)
    remap[order] = np.arange(len(order))
    v = vertices[first[order]]
    f = remap[inv.reshape(-1)][faces]
    keep = (f[:, 0] != f[:, 1]) & (f[:, 1] != f[:, 2]) & (f[:, 0] != f[:, 2])
    return v, f[keep]


def box(lo, hi, spacing):
    """Closed axis-aligned box with outward-facing triangles roughly ``spacing`` apart."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    ext = hi - lo
    if np.any(ext <= 0):
        raise ValueError("box extents must be positive")
    n = np.maximum(np.ceil(ext / spacing).astype(int), 1)
    verts, faces = [], []
    offset = 0
    for axis in range(3):
        a, b = [k for k in range(3) if k != axis]
        for side in (0, 1):
            us = np.linspace(lo[a], hi[a], n[a] + 1)
            ws = np.linspace(lo[b], hi[b], n[b] + 1)
            uu, ww = np.meshgrid(us, ws, indexing="ij")
            p = np.zeros(uu.shape + (3,))
            p[..., a], p[..., b] = uu, ww
            p[..., axis] = hi[axis] if side else lo[axis]
            verts.append(p.reshape(-1, 3))
            nw = n[b] + 1
            i, j = np.meshgrid(np.arange(n[a]), np.arange(n[b]), indexing="ij")
            v00 = (i * nw + j).ravel() + offset
            v10, v01, v11 = v00 + nw, v00 + 1, v00 + nw + 1
            t = np.concatenate([np.stack([v00, v10, v11], 1), np.stack([v00, v11, v01], 1)])
            # (a, b, axis) right-handed means the grid normal points along +axis
            rh = (a, b, axis) in ((0, 1, 2), (1, 2, 0), (2, 0, 1))
            if rh != bool(side):
                t = t[:, [0, 2, 1]]
            faces.append(t)
            offset += len(p.reshape(-1, 3))
    return _weld(np.concatenate(verts), np.concatenate(faces))


def cylinder(radius, z0, z1, spacing):
    """Closed cylinder about the z axis between heights ``z0 < z1``."""
    if radius <= 0 or z1 <= z0:
        raise ValueError("cylinder needs positive radius and height")
    m = max(int(np.ceil(2 * np.pi * radius / spacing)), 8)
    nz = max(int(np.ceil((z1 - z0) / spacing)), 1)
    nr = max(int(np.ceil(radius / spacing)), 1)
    ang = 2 * np.pi * np.arange(m) / m
    ring = np.stack([np.cos(ang), np.sin(ang)], 1)
    verts = [np.c_[radius * ring, np.full(m, z)] for z in np.linspace(z0, z1, nz + 1)]
    count = (nz + 1) * m
    faces = []
    for k in range(nz):
        a = k * m + np.arange(m)
        b = k * m + (np.arange(m) + 1) % m
        faces += [np.stack([a, b, b + m], 1), np.stack([a, b + m, a + m], 1)]
    for z, outer, up in ((z0, np.arange(m), False), (z1, nz * m + np.arange(m), True)):
        rings = [outer]
        for r in np.linspace(radius, 0.0, nr + 1)[1:-1]:
            verts.append(np.c_[r * ring, np.full(m, z)])
            rings.append(count + np.arange(m))
            count += m
        verts.append(np.array([[0.0, 0.0, z]]))
        centre = count
        count += 1
        cap = []
        for o, i in zip(rings[:-1], rings[1:]):
            o2, i2 = np.roll(o, -1), np.roll(i, -1)
            cap += [np.stack([o, o2, i2], 1), np.stack([o, i2, i], 1)]
        last = rings[-1]
        cap.append(np.stack([last, np.roll(last, -1), np.full(m, centre)], 1))
        cap = np.concatenate(cap)
        faces.append(cap if up else cap[:, [0, 2, 1]])
    return _weld(np.concatenate(verts), np.concatenate(faces))


def icosphere(subdivisions=2, radius=1.0):
    t = (1.0 + 5 ** 0.5) / 2.0
    v = np.array([[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
                  [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
                  [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]], float)
    f = np.array([[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
                  [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
                  [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
                  [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]])
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    for _ in range(subdivisions):
        e = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
        uniq, inv = np.unique(e, axis=0, return_inverse=True)
        mid = v[uniq[:, 0]] + v[uniq[:, 1]]
        mid /= np.linalg.norm(mid, axis=1, keepdims=True)
        m = inv.reshape(-1) + len(v)
        nf = len(f)
        a, b, c = m[:nf], m[nf:2 * nf], m[2 * nf:]
        f = np.concatenate([np.stack([f[:, 0], a, c], 1), np.stack([f[:, 1], b, a], 1),
                            np.stack([f[:, 2], c, b], 1), np.stack([a, b, c], 1)])
        v = np.concatenate([v, mid])
    return v * radius, f
