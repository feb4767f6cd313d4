"""Object encodings: scale normalization, basis point sets and global states.

Three basis-point variants share one output layout, ``(N, 2K, 3)`` offsets
from each basis point to its nearest object vertex:

* ``part_bps`` (NP-BPS): object scaled into the unit ball, the same K basis
  points mapped separately onto the top part (rows ``[0, K)``) and the bottom
  part (rows ``[K, 2K)``).
* ``part_agnostic_bps`` (NPA-BPS): scaled object, 2K unit-ball points mapped
  onto the whole object.
* ``unnormalized_bps`` (U-BPS): metric object, 2K points in a 0.5 m ball.

Every variant also records which vertex each basis point landed on, so the
anchor vertices used by contact maps are recovered exactly rather than by
re-adding the basis point to a float offset.
"""
from dataclasses import dataclass

import numpy as np

from .geometry import BOTTOM, TOP, InvalidInputError, NearestIndex, ObjectTrajectory

DEFAULT_MARGIN = 0.15
DEFAULT_K = 512

VARIANTS = ("np-bps", "npa-bps", "u-bps")


@dataclass(frozen=True)
class BasisPointSet:
    points: np.ndarray
    seed: int
    radius: float = 1.0

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True)
class ObjectScale:
    s_o: float
    d_margin: float


@dataclass(frozen=True)
class BpsFeatures:
    """Offsets ``O`` (N, 2K, 3), the vertex each row maps to, and the scale used.

    ``layout`` is ``("top", "bottom")`` for the part-based variant and
    ``("object",)`` otherwise.
    """
    offsets: np.ndarray
    vertex_index: np.ndarray
    scale: float
    variant: str
    layout: tuple

    @property
    def num_frames(self):
        return self.offsets.shape[0]

    def anchors(self, obj, traj):
        """Anchor vertices in metres, canonical frame, per frame: (N, 2K, 3)."""
        return np.stack([obj.articulate(a)[idx] for a, idx in zip(traj.a, self.vertex_index)])


def compute_scale(obj, d_margin=DEFAULT_MARGIN):
    """Scale that places the opened object inside the unit ball with a margin."""
    if not 0.0 < d_margin < 1.0:
        raise InvalidInputError("d_margin must lie in (0, 1)")
    v = obj.articulate(obj.opening_angle)
    extent = np.linalg.norm(v, axis=1).max()
    if extent <= 0.0:
        raise InvalidInputError("object has zero extent")
    return ObjectScale((1.0 - d_margin) / extent, d_margin)


def sample_basis_points(k, seed, radius=1.0):
    """``k`` points i.i.d. uniform in the ball of ``radius`` (Gaussian direction, U^(1/3) radius)."""
    if k < 1:
        raise InvalidInputError("K must be >= 1")
    rng = np.random.default_rng(seed)
    d = rng.standard_normal((k, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    r = rng.random(k) ** (1.0 / 3.0)
    return BasisPointSet(d * (radius * r)[:, None], int(seed), float(radius))


def _scale_value(scale):
    return scale.s_o if isinstance(scale, ObjectScale) else float(scale)


def _map(points, verts, subset):
    """Nearest vertex among ``verts[subset]`` for each point; returns global indices."""
    sub = np.flatnonzero(subset)
    if len(sub) == 0:
        raise InvalidInputError("cannot map basis points onto an empty part")
    idx, _, _ = NearestIndex(verts[sub]).query(points)
    return sub[idx]


def _check_parts(obj):
    for p in (TOP, BOTTOM):
        if not np.any(obj.mesh.part_id == p):
            raise InvalidInputError("both object parts must be non-empty")


def part_bps(traj, obj, basis, scale):
    """Normalized part-based BPS (the default encoding)."""
    _check_parts(obj)
    s = _scale_value(scale)
    b = basis.points
    k = len(b)
    offsets = np.empty((len(traj), 2 * k, 3))
    index = np.empty((len(traj), 2 * k), dtype=np.int64)
    for i, a in enumerate(traj.a):
        v = obj.articulate(a) * s
        for slot, part in enumerate((TOP, BOTTOM)):
            idx = _map(b, v, obj.mesh.part_id == part)
            rows = slice(slot * k, (slot + 1) * k)
            index[i, rows] = idx
            offsets[i, rows] = v[idx] - b
    return BpsFeatures(offsets, index, s, "np-bps", ("top", "bottom"))


def part_agnostic_bps(traj, obj, basis, scale):
    """Normalized BPS with 2K basis points mapped onto the whole object."""
    _check_parts(obj)
    s = _scale_value(scale)
    b = basis.points
    offsets = np.empty((len(traj), len(b), 3))
    index = np.empty((len(traj), len(b)), dtype=np.int64)
    everything = np.ones(len(obj.mesh.vertices), dtype=bool)
    for i, a in enumerate(traj.a):
        v = obj.articulate(a) * s
        index[i] = _map(b, v, everything)
        offsets[i] = v[index[i]] - b
    return BpsFeatures(offsets, index, s, "npa-bps", ("object",))


def unnormalized_bps(traj, obj, basis):
    """Metric-scale BPS; ``basis`` is typically 2K points in a 0.5 m ball."""
    _check_parts(obj)
    b = basis.points
    offsets = np.empty((len(traj), len(b), 3))
    index = np.empty((len(traj), len(b)), dtype=np.int64)
    everything = np.ones(len(obj.mesh.vertices), dtype=bool)
    for i, a in enumerate(traj.a):
        v = obj.articulate(a)
        index[i] = _map(b, v, everything)
        offsets[i] = v[index[i]] - b
    return BpsFeatures(offsets, index, 1.0, "u-bps", ("object",))


def encode(variant, traj, obj, k=DEFAULT_K, seed=0, d_margin=DEFAULT_MARGIN):
    """Compute one of the three variants with its own seeded basis (2K rows each)."""
    if variant == "np-bps":
        return part_bps(traj, obj, sample_basis_points(k, seed), compute_scale(obj, d_margin))
    if variant == "npa-bps":
        return part_agnostic_bps(traj, obj, sample_basis_points(2 * k, seed),
                                 compute_scale(obj, d_margin))
    if variant == "u-bps":
        return unnormalized_bps(traj, obj, sample_basis_points(2 * k, seed, radius=0.5))
    raise InvalidInputError(f"unknown BPS variant {variant!r}; expected one of {VARIANTS}")


def global_states(traj):
    """(N, 6): translation relative to frame 0, then the axis-angle rotation."""
    if not isinstance(traj, ObjectTrajectory):
        traj = ObjectTrajectory(*traj)
    g = np.empty((len(traj), 6))
    g[:, :3] = traj.g[:, 3:] - traj.g[0, 3:]
    g[:, 3:] = traj.g[:, :3]
    return g
