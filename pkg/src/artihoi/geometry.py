"""Meshes, rigid transforms, two-part articulated objects and spatial queries.

Conventions
-----------
* Canonical frame: the hinge axis is the -z axis through the origin.
* An articulation angle ``a`` rotates the top part right-handedly about -z,
  i.e. by ``-a`` about +z, so ``(1, 0, 0)`` goes to ``(0, -1, 0)`` at ``a = pi/2``.
* A global state ``g`` is ``[axis-angle rotation (3) | translation (3)]`` and
  maps canonical to world coordinates: ``x_w = R(g) x_c + t(g)``.
"""
from dataclasses import dataclass, field

import numpy as np

from . import kernels

TOP, BOTTOM = 0, 1
PART_NAMES = ("top", "bottom")

# (1, phi, phi^2) with phi the golden ratio: never parallel to a grid axis or diagonal
_PHI = (1.0 + 5.0 ** 0.5) / 2.0
RAY_DIRECTION = np.array([1.0, _PHI, _PHI * _PHI]) / np.linalg.norm([1.0, _PHI, _PHI * _PHI])


class InvalidInputError(ValueError):
    pass


class MeshError(ValueError):
    """The mesh violates a structural requirement (e.g. not watertight)."""


def _finite(x, what):
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise InvalidInputError(f"{what} contains non-finite values")
    return x


# ---------------------------------------------------------------------------
# rotations

def axis_angle_to_matrix(rotvec):
    """Rodrigues' formula, vectorized over leading axes."""
    r = np.asarray(rotvec, dtype=np.float64)
    theta = np.linalg.norm(r, axis=-1)[..., None, None]
    k = np.zeros(r.shape[:-1] + (3, 3))
    k[..., 0, 1], k[..., 0, 2] = -r[..., 2], r[..., 1]
    k[..., 1, 0], k[..., 1, 2] = r[..., 2], -r[..., 0]
    k[..., 2, 0], k[..., 2, 1] = -r[..., 1], r[..., 0]
    small = theta < 1e-6
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta ** 2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta ** 2 / 24.0, (1.0 - np.cos(safe)) / safe ** 2)
    return np.eye(3) + a * k + b * (k @ k)


def matrix_to_axis_angle(rot):
    rot = np.asarray(rot, dtype=np.float64)
    cos = np.clip((np.trace(rot, axis1=-2, axis2=-1) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos)
    w = np.stack([rot[..., 2, 1] - rot[..., 1, 2],
                  rot[..., 0, 2] - rot[..., 2, 0],
                  rot[..., 1, 0] - rot[..., 0, 1]], axis=-1)
    sin = np.sin(theta)
    out = np.empty(w.shape)
    near_pi = theta > np.pi - 1e-6
    regular = ~near_pi
    scale = np.where(sin[...] > 1e-12, theta / (2.0 * np.where(sin > 1e-12, sin, 1.0)), 0.5)
    out[regular] = (w * scale[..., None])[regular]
    if np.any(near_pi):
        m = rot[near_pi]
        d = np.clip((np.diagonal(m, axis1=-2, axis2=-1) + 1.0) / 2.0, 0.0, None)
        ax = np.sqrt(d)
        i = np.argmax(ax, axis=-1)
        rows = m[np.arange(len(m)), i]
        ax = (rows + np.eye(3)[i]) / (2.0 * ax[np.arange(len(m)), i][:, None])
        ax /= np.linalg.norm(ax, axis=-1, keepdims=True)
        out[near_pi] = ax * theta[near_pi][:, None]
    return out


def rot_z(angle):
    c, s = np.cos(angle), np.sin(angle)
    m = np.zeros(np.shape(angle) + (3, 3))
    m[..., 0, 0], m[..., 0, 1] = c, -s
    m[..., 1, 0], m[..., 1, 1] = s, c
    m[..., 2, 2] = 1.0
    return m


def articulation_rotation(a):
    """Rotation by ``a`` (right-handed) about the -z hinge axis."""
    return rot_z(-np.asarray(a, dtype=np.float64))


# ---------------------------------------------------------------------------
# data types

@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = _finite(self.rotation, "rotation").reshape(3, 3)
        t = _finite(self.translation, "translation").reshape(3)
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-9) or abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise InvalidInputError("rotation is not a proper orthonormal matrix")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_global_state(cls, g):
        g = _finite(g, "global state").reshape(6)
        return cls(axis_angle_to_matrix(g[:3]), g[3:])

    def apply(self, points):
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def inverse(self):
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)

    def matrix(self):
        m = np.eye(4)
        m[:3, :3], m[:3, 3] = self.rotation, self.translation
        return m


@dataclass(frozen=True)
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray
    part_id: np.ndarray = None

    def __post_init__(self):
        v = _finite(self.vertices, "mesh vertices")
        if v.ndim != 2 or v.shape[1] != 3:
            raise InvalidInputError("vertices must have shape (V, 3)")
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise InvalidInputError("face index out of range")
        pid = (np.full(len(v), BOTTOM, dtype=np.int8) if self.part_id is None
               else np.asarray(self.part_id, dtype=np.int8).reshape(-1))
        if len(pid) != len(v):
            raise InvalidInputError("part_id length must match vertex count")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        object.__setattr__(self, "part_id", pid)

    def part_mask(self, part):
        return self.part_id == part

    def with_vertices(self, vertices):
        return Mesh(vertices, self.faces, self.part_id)


@dataclass(frozen=True)
class ObjectTrajectory:
    """Per-frame global state ``g`` (N, 6) and articulation angle ``a`` (N,)."""
    g: np.ndarray
    a: np.ndarray

    def __post_init__(self):
        g = _finite(self.g, "global states").reshape(-1, 6)
        a = _finite(self.a, "articulation angles").reshape(-1)
        if len(g) < 1 or len(g) != len(a):
            raise InvalidInputError("trajectory needs N >= 1 frames with matching g and a")
        object.__setattr__(self, "g", g)
        object.__setattr__(self, "a", a)

    def __len__(self):
        return len(self.a)

    def transform(self, i):
        return RigidTransform.from_global_state(self.g[i])

    def frame(self, i):
        return self.g[i], float(self.a[i])


@dataclass(frozen=True)
class ArticulatedObject:
    """Two-part object in its canonical frame, hinged about -z through the origin."""
    mesh: Mesh
    opening_angle: float = np.pi
    category: str = "object"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for p in (TOP, BOTTOM):
            if np.count_nonzero(self.mesh.part_id == p) < 4:
                raise InvalidInputError(f"part {PART_NAMES[p]!r} needs at least 4 vertices")
        if np.any((self.mesh.part_id != TOP) & (self.mesh.part_id != BOTTOM)):
            raise InvalidInputError("part_id must be 0 (top) or 1 (bottom)")

    @property
    def top_mask(self):
        return self.mesh.part_id == TOP

    def articulate(self, a):
        """Canonical vertices with the top part rotated by angle ``a``."""
        a = float(_finite(a, "articulation angle"))
        v = self.mesh.vertices.copy()
        top = self.top_mask
        v[top] = v[top] @ articulation_rotation(a).T
        return v


def pose_object(obj, frame):
    """World-space vertices of ``obj`` at ``frame = (g, a)``."""
    g, a = frame
    return RigidTransform.from_global_state(g).apply(obj.articulate(a))


def to_canonical(points, frame):
    """Map world points into the object's canonical frame (inverse of ``g``)."""
    g = frame[0] if isinstance(frame, tuple) else frame
    p = _finite(points, "points")
    return RigidTransform.from_global_state(g).inverse().apply(p)


def from_canonical(points, frame):
    g = frame[0] if isinstance(frame, tuple) else frame
    return RigidTransform.from_global_state(g).apply(_finite(points, "points"))


# ---------------------------------------------------------------------------
# nearest neighbour

_BRUTE_LIMIT = 2048


class NearestIndex:
    """Exact nearest-vertex queries against a fixed reference set.

    Ties are broken by the lowest reference index.  Small sets are searched
    exhaustively; larger ones through a uniform grid with ring expansion.
    """

    def __init__(self, reference, backend=None):
        ref = np.ascontiguousarray(_finite(reference, "reference points"))
        if ref.ndim != 2 or ref.shape[1] != 3 or len(ref) == 0:
            raise InvalidInputError("reference must be a non-empty (M, 3) array")
        self.reference = ref
        self._k = kernels.get_backend(backend)
        self._grid = None
        if len(ref) > _BRUTE_LIMIT:
            self._grid = self._build_grid(ref)

    @staticmethod
    def _build_grid(ref):
        lo, hi = ref.min(axis=0), ref.max(axis=0)
        ext = hi - lo
        span = max(ext.max(), 1e-12)
        active = ext > 1e-9 * span
        n_active = max(int(active.sum()), 1)
        vol = np.prod(ext[active]) if active.any() else span
        h = (vol / max(len(ref) / 2.0, 1.0)) ** (1.0 / n_active)
        h = max(h, span / 256.0)
        dims = np.maximum(np.ceil(ext / h).astype(np.int64), 1)
        cells = np.clip(np.floor((ref - lo) / h).astype(np.int64), 0, dims - 1)
        flat = (cells[:, 0] * dims[1] + cells[:, 1]) * dims[2] + cells[:, 2]
        order = np.argsort(flat, kind="stable").astype(np.int64)
        start = np.zeros(int(np.prod(dims)) + 1, dtype=np.int64)
        np.add.at(start, flat + 1, 1)
        return lo.astype(np.float64), float(h), dims, np.cumsum(start), order

    def query(self, points):
        """Return ``(index, distance, vector)`` with ``vector = ref[index] - point``."""
        q = np.ascontiguousarray(_finite(points, "query points")).reshape(-1, 3)
        if self._grid is None:
            idx, d2 = self._k.nearest_brute(q, self.reference)
        else:
            lo, h, dims, start, items = self._grid
            idx, d2 = self._k.nearest_grid(q, self.reference, lo, h, dims, start, items)
        return idx, np.sqrt(d2), self.reference[idx] - q


def nearest_vertex(query, reference, backend=None):
    """Nearest reference point for every query point: ``(index, distance, vector)``."""
    return NearestIndex(reference, backend=backend).query(query)


# ---------------------------------------------------------------------------
# containment

def edge_manifold_report(mesh):
    """Check every undirected edge is shared by exactly two oppositely oriented faces.

    Returns the Euler characteristic ``V - E + F`` over referenced vertices.
    """
    f = mesh.faces
    if len(f) == 0:
        raise MeshError("mesh has no faces")
    directed = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    if np.any(directed[:, 0] == directed[:, 1]):
        raise MeshError("degenerate face with repeated vertex")
    n = len(mesh.vertices)
    dkey = directed[:, 0] * n + directed[:, 1]
    if len(np.unique(dkey)) != len(dkey):
        raise MeshError("mesh is not watertight: a directed edge occurs twice "
                        "(non-manifold or inconsistent orientation)")
    rkey = directed[:, 1] * n + directed[:, 0]
    if not np.all(np.isin(rkey, dkey)):
        raise MeshError("mesh is not watertight: boundary edge without opposite twin")
    used = len(np.unique(f))
    return used - len(dkey) // 2 + len(f)


class MeshContainment:
    """Ray-parity inside test against a watertight triangle mesh.

    The ray direction is fixed; triangles are binned by their projection onto
    the plane orthogonal to the ray so each query only visits triangles whose
    projected bounding box covers its own projection.  Points whose ray grazes
    an edge, a vertex or starts on the surface are retried once along a
    jittered direction against every triangle.
    """

    EPS = 1e-9

    def __init__(self, mesh, direction=RAY_DIRECTION, backend=None):
        self.euler = edge_manifold_report(mesh)
        v = mesh.vertices
        f = mesh.faces
        self._v0 = np.ascontiguousarray(v[f[:, 0]])
        self._e1 = np.ascontiguousarray(v[f[:, 1]] - v[f[:, 0]])
        self._e2 = np.ascontiguousarray(v[f[:, 2]] - v[f[:, 0]])
        self._k = kernels.get_backend(backend)
        self.lo, self.hi = v.min(axis=0), v.max(axis=0)
        d = np.asarray(direction, dtype=np.float64)
        self.direction = d / np.linalg.norm(d)
        self._setup_bins(v[f])
        rng = np.random.default_rng(20240611)
        jit = self.direction + 1e-3 * rng.standard_normal(3)
        self._jitter_dir = jit / np.linalg.norm(jit)

    def _basis(self):
        d = self.direction
        u = np.cross(d, [0.0, 0.0, 1.0])
        u /= np.linalg.norm(u)
        return u, np.cross(d, u)

    def _setup_bins(self, tris):
        u, w = self._basis()
        pu, pw = tris @ u, tris @ w
        lo = np.array([pu.min(), pw.min()])
        hi = np.array([pu.max(), pw.max()])
        m = len(tris)
        span = max((hi - lo).max(), 1e-12)
        h = max(span / max(np.sqrt(m), 1.0), 1e-12)
        dims = np.maximum(np.ceil((hi - lo) / h).astype(np.int64), 1)
        i0 = np.clip(np.floor((pu.min(1) - lo[0]) / h).astype(np.int64), 0, dims[0] - 1)
        i1 = np.clip(np.floor((pu.max(1) - lo[0]) / h).astype(np.int64), 0, dims[0] - 1)
        j0 = np.clip(np.floor((pw.min(1) - lo[1]) / h).astype(np.int64), 0, dims[1] - 1)
        j1 = np.clip(np.floor((pw.max(1) - lo[1]) / h).astype(np.int64), 0, dims[1] - 1)
        ni, nj = i1 - i0 + 1, j1 - j0 + 1
        cnt = ni * nj
        tri = np.repeat(np.arange(m), cnt)
        k = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
        nj_r = np.repeat(nj, cnt)
        cell = (np.repeat(i0, cnt) + k // nj_r) * dims[1] + np.repeat(j0, cnt) + k % nj_r
        order = np.argsort(cell, kind="stable")
        start = np.zeros(int(dims.prod()) + 1, dtype=np.int64)
        np.add.at(start, cell + 1, 1)
        self._bins = (u, w, lo, h, dims, np.cumsum(start), tri[order].astype(np.int64))

    def _cells(self, pts):
        u, w, lo, h, dims, _, _ = self._bins
        a = np.floor((pts @ u - lo[0]) / h)
        b = np.floor((pts @ w - lo[1]) / h)
        out = -np.ones(len(pts), dtype=np.int64)
        ok = (a >= 0) & (a < dims[0]) & (b >= 0) & (b < dims[1])
        out[ok] = a[ok].astype(np.int64) * dims[1] + b[ok].astype(np.int64)
        return out

    def contains(self, points):
        p = np.ascontiguousarray(_finite(points, "points")).reshape(-1, 3)
        inside = np.zeros(len(p), dtype=bool)
        box = np.all((p >= self.lo) & (p <= self.hi), axis=1)
        idx = np.flatnonzero(box)
        if len(idx) == 0:
            return inside
        q = np.ascontiguousarray(p[idx])
        _, _, _, _, _, start, items = self._bins
        counts, degen = self._k.ray_crossings(q, self._v0, self._e1, self._e2, self.direction,
                                              self._cells(q), start, items, self.EPS)
        inside[idx] = counts % 2 == 1
        bad = np.flatnonzero(degen)
        if len(bad):
            m = len(self._v0)
            all_start = np.array([0, m], dtype=np.int64)
            all_items = np.arange(m, dtype=np.int64)
            qb = np.ascontiguousarray(q[bad])
            c2, _ = self._k.ray_crossings(qb, self._v0, self._e1, self._e2, self._jitter_dir,
                                          np.zeros(len(bad), dtype=np.int64),
                                          all_start, all_items, self.EPS)
            inside[idx[bad]] = c2 % 2 == 1
        return inside


class ObjectFrames:
    """Per-frame articulated object with cached nearest-vertex and containment queries.

    Frames sharing an articulation angle share one set of structures.
    """

    def __init__(self, obj, angles, backend=None):
        self.obj = obj
        self.angles = np.asarray(angles, dtype=np.float64).reshape(-1)
        self._backend = backend
        self._cache = {}

    def __len__(self):
        return len(self.angles)

    def _entry(self, i):
        key = float(self.angles[i])
        if key not in self._cache:
            v = self.obj.articulate(key)
            self._cache[key] = (v, NearestIndex(v, self._backend),
                                MeshContainment(self.obj.mesh.with_vertices(v),
                                                backend=self._backend))
        return self._cache[key]

    def vertices(self, i):
        return self._entry(i)[0]

    def nearest(self, i, points):
        return self._entry(i)[1].query(points)

    def contains(self, i, points):
        return self._entry(i)[2].contains(points)


def point_inside_mesh(mesh, p):
    """True where ``p`` (a point or (n, 3) array) lies inside the watertight ``mesh``."""
    res = MeshContainment(mesh).contains(np.reshape(p, (-1, 3)))
    return bool(res[0]) if np.ndim(p) == 1 else res


# ---------------------------------------------------------------------------
# OBJ

def write_obj(path, mesh, groups=True):
    """Write vertices with round-trip exact float formatting; faces grouped by part."""
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    f = mesh.faces
    if groups:
        fpart = mesh.part_id[f[:, 0]]
        for p in (TOP, BOTTOM):
            sel = f[fpart == p]
            if len(sel):
                lines.append(f"g {PART_NAMES[p]}")
                lines.extend(f"f {a + 1} {b + 1} {c + 1}" for a, b, c in sel.tolist())
    else:
        lines.extend(f"f {a + 1} {b + 1} {c + 1}" for a, b, c in f.tolist())
    from .container import atomic_write_bytes
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("ascii"))


def read_obj(path):
    verts, faces, fgroup = [], [], []
    group = BOTTOM
    with open(path) as fh:
        for line in fh:
            tok = line.split()
            if not tok:
                continue
            if tok[0] == "v":
                verts.append([float(t) for t in tok[1:4]])
            elif tok[0] == "g":
                name = tok[1] if len(tok) > 1 else ""
                group = TOP if name == "top" else BOTTOM
            elif tok[0] == "f":
                idx = [int(t.split("/")[0]) for t in tok[1:]]
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                for k in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[k], idx[k + 1]])
                    fgroup.append(group)
    verts = np.array(verts, dtype=np.float64).reshape(-1, 3)
    faces = np.array(faces, dtype=np.int64).reshape(-1, 3)
    part = np.full(len(verts), BOTTOM, dtype=np.int8)
    if len(faces):
        part[faces.ravel()] = np.repeat(np.array(fgroup, dtype=np.int8), 3)
    return Mesh(verts, faces, part)


def write_obj_groups(path, groups):
    """Write several named meshes ``[(name, vertices, faces), ...]`` into one OBJ."""
    lines, base = [], 0
    for name, verts, faces in groups:
        verts = np.asarray(verts, dtype=np.float64)
        lines.append(f"o {name}")
        lines.extend(f"v {x!r} {y!r} {z!r}" for x, y, z in verts.tolist())
        lines.extend(f"f {a + base + 1} {b + base + 1} {c + base + 1}"
                     for a, b, c in np.asarray(faces, dtype=np.int64).tolist())
        base += len(verts)
    from .container import atomic_write_bytes
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("ascii"))


def read_obj_groups(path):
    """Inverse of :func:`write_obj_groups`: ``{name: (vertices, faces)}`` with local indices."""
    out = {}
    name, base = None, 0
    verts, faces = [], []

    def flush():
        if name is not None:
            out[name] = (np.array(verts, dtype=np.float64).reshape(-1, 3),
                         np.array(faces, dtype=np.int64).reshape(-1, 3) - base)

    with open(path) as fh:
        for line in fh:
            tok = line.split()
            if not tok:
                continue
            if tok[0] == "o":
                flush()
                base += len(verts)
                name, verts, faces = tok[1], [], []
            elif tok[0] == "v":
                verts.append([float(t) for t in tok[1:4]])
            elif tok[0] == "f":
                faces.append([int(t.split("/")[0]) - 1 for t in tok[1:4]])
    flush()
    return out
