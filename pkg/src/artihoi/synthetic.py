"""Toy articulated objects, trajectories and grasping hands.

Families (canonical frame, hinge along the z axis through the origin; the
top part rotates by ``-a`` about +z):

* ``box``: base ``x in [g, L], y in [g, Hb]``; lid ``x in [g, fL], y in [-Ht, -g]``.
* ``cylinder``: body ``z in [g, Hb]``; cap ``z in [-Hc, -g]``, twisting about z.
* ``scissors``: two bars crossing at the hinge, stacked in z.

The left hand rests flat on the bottom part and the right hand on the top
part, following it as it articulates.  Each part has one placement face; the
hand sits in its central half with the fingers along the face axis up to a
small angular noise.  A single mode per part keeps the toy distribution
learnable from a few hundred sequences.  Placements are rejection-sampled until
no hand vertex is inside the object and every frame has contact.
"""
from dataclasses import dataclass, field

import numpy as np

from . import container
from .geometry import (BOTTOM, TOP, ArticulatedObject, InvalidInputError, Mesh, ObjectFrames,
                       ObjectTrajectory, articulation_rotation, axis_angle_to_matrix)
from .hand import POSE_DIM, SHAPE_DIM, HandMotion, HandParams, compose_root, lbs_forward
from .shapes import box, cylinder

FAMILIES = ("box", "cylinder", "scissors")
SCENE_KIND = "scene"
SCENE_SCHEMA = 1
GAP = 0.004
CLEARANCE = 0.002
CONTACT_EPS = 0.005
PHI_STD = 0.25


def q32(x):
    """Round to the nearest float32 value (kept as float64) so files round-trip exactly."""
    return np.asarray(x, dtype=np.float64).astype(np.float32).astype(np.float64)


@dataclass(frozen=True)
class SyntheticSpec:
    family: str = "box"
    frames: int = 32
    seed: int = 0
    size: float = 1.0
    spacing: float = 0.008
    fps: float = 30.0
    lid_fraction: float = 1.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise InvalidInputError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if self.frames < 1:
            raise InvalidInputError("frames must be >= 1")
        if not self.size > 0 or not self.spacing > 0 or not 0 < self.lid_fraction <= 1:
            raise InvalidInputError("size, spacing and lid_fraction must be positive")


@dataclass
class SceneFile:
    obj: ArticulatedObject
    traj: ObjectTrajectory
    fps: float = 30.0
    hand_params: list = None       # [left, right] HandParams or None
    meta: dict = field(default_factory=dict)

    @property
    def num_frames(self):
        return len(self.traj)


# ---------------------------------------------------------------------------
# objects

def _two_part(top, bottom):
    (vt, ft), (vb, fb) = top, bottom
    v = np.concatenate([vt, vb])
    f = np.concatenate([ft, fb + len(vt)])
    pid = np.concatenate([np.full(len(vt), TOP), np.full(len(vb), BOTTOM)])
    return Mesh(q32(v), f, pid)


def make_object(family, rng, size=1.0, spacing=0.008, lid_fraction=1.0):
    """Random member of ``family`` plus the hand-placement faces for each part."""
    u = lambda lo, hi: float(rng.uniform(lo, hi)) * size
    g = GAP / 2
    if family == "box":
        L, W, hb, ht = u(0.14, 0.22), u(0.10, 0.16), u(0.05, 0.09), u(0.012, 0.02)
        top = box([g, -ht, -W / 2], [g + lid_fraction * (L - g), -g, W / 2], spacing)
        bottom = box([g, g, -W / 2], [L, hb, W / 2], spacing)
        mesh = _two_part(top, bottom)
        lid_len = lid_fraction * (L - g)
        faces = {TOP: [((g + lid_len / 2, -ht, 0.0), (0, -1, 0), (1, 0, 0), (lid_len / 2, W / 2))],
                 BOTTOM: [((L / 2, hb, 0.0), (0, 1, 0), (1, 0, 0), (L / 2, W / 2))]}
        return ArticulatedObject(mesh, np.pi, "box", {"dims": [L, W, hb, ht]}), faces
    if family == "cylinder":
        r, hb, hc = u(0.035, 0.05), u(0.10, 0.16), u(0.015, 0.03)
        top = cylinder(r, -hc, -g, spacing)
        bottom = cylinder(r, g, hb, spacing)
        mesh = _two_part(top, bottom)
        faces = {TOP: [((0, 0, -hc), (0, 0, -1), (1, 0, 0), (r * 0.5, r * 0.5))],
                 BOTTOM: [((r, 0, hb / 2), (1, 0, 0), (0, 0, 1), (hb / 3, 0.0))]}
        return ArticulatedObject(mesh, np.pi, "cylinder", {"dims": [r, hb, hc]}), faces
    if family == "scissors":
        L, w, t = u(0.16, 0.22), u(0.018, 0.026), u(0.006, 0.01)
        top = box([-0.35 * L, -w / 2, -g - t], [0.65 * L, w / 2, -g], spacing)
        bottom = box([-0.35 * L, -w / 2, g], [0.65 * L, w / 2, g + t], spacing)
        mesh = _two_part(top, bottom)
        faces = {TOP: [((0.3 * L, 0, -g - t), (0, 0, -1), (1, 0, 0), (0.25 * L, 0.0))],
                 BOTTOM: [((0.3 * L, 0, g + t), (0, 0, 1), (1, 0, 0), (0.25 * L, 0.0))]}
        return ArticulatedObject(mesh, 0.0, "scissors", {"dims": [L, w, t]}), faces
    raise InvalidInputError(f"unknown family {family!r}")


def _articulation_range(family):
    return {"box": (0.0, np.pi * 0.9), "cylinder": (0.0, np.pi), "scissors": (0.0, 0.8)}[family]


def make_trajectory(family, n, rng):
    """Lift, yaw and articulate over ``n`` frames with smooth ease-in/out."""
    lo, hi = _articulation_range(family)
    a0 = rng.uniform(lo, lo + 0.2 * (hi - lo))
    a1 = rng.uniform(lo + 0.5 * (hi - lo), hi)
    s = np.linspace(0.0, 1.0, n) if n > 1 else np.zeros(1)
    # opening spans most of the clip so per-frame angle steps stay moderate
    start = rng.uniform(0.0, 0.3)
    stop = min(1.0, start + rng.uniform(0.6, 0.9))
    w = np.clip((s - start) / (stop - start), 0.0, 1.0)
    a = a0 + (a1 - a0) * 0.5 * (1 - np.cos(np.pi * w))
    yaw0 = rng.uniform(-np.pi, np.pi)
    yaw = yaw0 + rng.uniform(-0.5, 0.5) * s
    lift = rng.uniform(0.05, 0.2) * s
    offset = np.array([rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), 0.8])
    g = np.zeros((n, 6))
    g[:, 2] = yaw
    g[:, 3:] = offset + np.outer(lift, [0.0, 0.0, 1.0])
    return ObjectTrajectory(q32(g), q32(a))


# ---------------------------------------------------------------------------
# hands

def _frame_rotation(normal, finger_dir):
    """Rotation taking local +x to ``finger_dir`` and local +z to ``normal``."""
    z = np.asarray(normal, float)
    x = np.asarray(finger_dir, float)
    return np.stack([x, np.cross(z, x), z], axis=1)


def _rest_params(model, rng):
    """Flat hand with small random finger spread and shape."""
    theta = np.zeros((1, POSE_DIM))
    for f in range(5):
        j = 1 + 3 * f
        theta[0, 3 + 3 * j + 2] = rng.normal(0.0, 0.08)   # spread about the palm normal
        for s in range(3):
            theta[0, 3 + 3 * (j + s) + 2] += rng.normal(0.0, 0.02)
    beta = np.clip(rng.normal(0.0, 0.4, SHAPE_DIM), -1.0, 1.0)
    return HandParams(theta, beta)


def place_hand(model, face, rng):
    """Flat hand resting on ``face = (centre, normal, axis, half_extent)`` with a small clearance."""
    centre, normal, axis, half = (np.asarray(x, float) for x in face)
    other = np.cross(normal, axis)
    # central region, fingers roughly along the face axis
    p = centre + rng.uniform(-0.5, 0.5) * half[0] * axis + rng.uniform(-0.5, 0.5) * half[1] * other
    phi = rng.normal(0.0, PHI_STD)
    fdir = np.cos(phi) * axis + np.sin(phi) * other
    # palm faces local -z, so local +z points away from the object
    rot = _frame_rotation(normal, fdir)
    params = _rest_params(model, rng)
    v = lbs_forward(model, params.theta[0], params.beta)
    palm = model.template[model.joint_regressor[0] > 0].mean(0) + np.array([0.04, 0.0, 0.0])
    posed = v @ rot.T
    shift = p - rot @ palm
    height = (posed + shift - centre) @ normal
    shift = shift + (CLEARANCE - height.min()) * normal
    return compose_root(model, params, rot, shift)


def _motion_for(model, rest, angles, on_top):
    n = len(angles)
    base = HandParams(np.repeat(rest.theta, n, axis=0), rest.beta)
    if not on_top:
        return base
    rots = np.stack([articulation_rotation(a) for a in angles])
    return compose_root(model, base, rots)


def _check(model, params, frames):
    verts = lbs_forward(model, params.theta, params.beta)
    for i in range(len(frames)):
        if frames.contains(i, verts[i]).any():
            return False
        _, d, _ = frames.nearest(i, verts[i])
        if d.min() > CONTACT_EPS:
            return False
    return True


def quantize_params(p):
    return HandParams(q32(p.theta), q32(p.beta))


def gen_synthetic(spec, models, max_tries=200):
    """Deterministic scene for ``spec`` with left/right hands; ``models`` = (left, right)."""
    rng = np.random.default_rng(spec.seed)
    obj, faces = make_object(spec.family, rng, spec.size, spec.spacing, spec.lid_fraction)
    traj = make_trajectory(spec.family, spec.frames, rng)
    frames = ObjectFrames(obj, traj.a)
    hands = []
    for model, part in zip(models, (BOTTOM, TOP)):
        for _ in range(max_tries):
            face = faces[part][rng.integers(len(faces[part]))]
            rest = place_hand(model, face, rng)
            params = quantize_params(_motion_for(model, rest, traj.a, part == TOP))
            if _check(model, params, frames):
                hands.append(params)
                break
        else:
            raise RuntimeError(f"could not place a hand on {spec.family} seed {spec.seed}")
    meta = {"family": spec.family, "seed": spec.seed, "spec": spec.__dict__.copy()}
    return SceneFile(obj, traj, spec.fps, hands, meta)


def hand_motion(scene, models, frames=None):
    """Canonical-frame keypoints and direction vectors of the scene's hands."""
    if scene.hand_params is None:
        raise InvalidInputError("scene has no hand motion")
    frames = frames or ObjectFrames(scene.obj, scene.traj.a)
    H, D = [], []
    for model, p in zip(models, scene.hand_params):
        kp = lbs_forward(model, p.theta, p.beta)[:, model.keypoint_index]
        H.append(kp)
        D.append(np.stack([frames.nearest(i, kp[i])[2] for i in range(len(kp))]))
    return HandMotion(np.stack(H), np.stack(D))


def hand_vertices(models, params):
    """(2, N, V, 3) dense hand vertices for per-hand parameters."""
    return np.stack([lbs_forward(m, p.theta, p.beta) for m, p in zip(models, params)])


# ---------------------------------------------------------------------------
# scene files

def save_scene(path, scene):
    m = scene.obj.mesh
    arrays = {"vertices": m.vertices.astype("<f4"), "faces": m.faces.astype("<i4"),
              "part_id": m.part_id.astype("|u1"), "g": scene.traj.g.astype("<f4"),
              "a": scene.traj.a.astype("<f4")}
    if scene.hand_params is not None:
        arrays["theta"] = np.stack([p.theta for p in scene.hand_params]).astype("<f4")
        arrays["beta"] = np.stack([p.beta for p in scene.hand_params]).astype("<f4")
    meta = dict(scene.meta, fps=scene.fps, opening_angle=scene.obj.opening_angle,
                category=scene.obj.category, object_meta=scene.obj.meta)
    container.save(path, SCENE_KIND, arrays, meta, SCENE_SCHEMA)


def load_scene(path):
    meta, a = container.load(path, kind=SCENE_KIND, schema_version=SCENE_SCHEMA)
    f64 = lambda k: a[k].astype(np.float64)
    mesh = Mesh(f64("vertices"), a["faces"].astype(np.int64), a["part_id"].astype(np.int8))
    obj = ArticulatedObject(mesh, float(meta["opening_angle"]), meta["category"],
                            meta.get("object_meta", {}))
    traj = ObjectTrajectory(f64("g"), f64("a"))
    hands = None
    if "theta" in a:
        hands = [HandParams(f64("theta")[k], f64("beta")[k]) for k in range(len(a["theta"]))]
    keep = {k: v for k, v in meta.items()
            if k not in ("fps", "opening_angle", "category", "object_meta") and not k.startswith("_")}
    return SceneFile(obj, traj, float(meta["fps"]), hands, keep)


def world_vertices(points, traj):
    """Map canonical per-frame points (..., N, P, 3) to world coordinates."""
    pts = np.asarray(points, dtype=np.float64)
    out = np.empty_like(pts)
    for i in range(len(traj)):
        r = axis_angle_to_matrix(traj.g[i, :3])
        out[..., i, :, :] = pts[..., i, :, :] @ r.T + traj.g[i, 3:]
    return out
