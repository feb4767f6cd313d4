"""Procedural skinned hand, keypoint/direction representation and parameter fitting.

The hand follows the MANO parameter layout: per frame 51 pose values (root
translation 3, root axis-angle 3, 15 joint axis-angles) and 10 shape
coefficients shared by the whole sequence.  Joint order is wrist, then three
joints each for index, middle, ring, pinky and thumb.

Local frame of the right hand: wrist at the origin, fingers along +x, thumb
towards +y, palm facing -z.  The left hand is the mirror image in y.
"""
from dataclasses import dataclass, field

import numpy as np
import torch
from torch.func import jacfwd, vmap

from . import container
from .geometry import InvalidInputError, NearestIndex, axis_angle_to_matrix, matrix_to_axis_angle

NUM_JOINTS = 16
POSE_DIM = 51
SHAPE_DIM = 10
PARENTS = np.array([-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 0, 10, 11, 0, 13, 14])
FINGERS = ("index", "middle", "ring", "pinky", "thumb")
KEYPOINT_VERSION = "fps-v1"
HAND_MODEL_SCHEMA = 1

# (base joint position, direction, segment lengths, radius)
_FINGER_LAYOUT = {
    "index": ((0.090, 0.026, 0.0), (1.0, 0.06, 0.0), (0.040, 0.025, 0.020), 0.0085),
    "middle": ((0.092, 0.008, 0.0), (1.0, 0.0, 0.0), (0.045, 0.028, 0.022), 0.0088),
    "ring": ((0.089, -0.010, 0.0), (1.0, -0.05, 0.0), (0.042, 0.026, 0.021), 0.0082),
    "pinky": ((0.084, -0.027, 0.0), (1.0, -0.12, 0.0), (0.033, 0.020, 0.018), 0.0072),
    "thumb": ((0.025, 0.032, 0.0), (0.7, 0.7, 0.0), (0.035, 0.030, 0.025), 0.0100),
}


@dataclass(frozen=True)
class HandModel:
    template: np.ndarray         # (V, 3)
    weights: np.ndarray          # (V, 16)
    parents: np.ndarray          # (16,)
    joint_regressor: np.ndarray  # (16, V)
    shape_basis: np.ndarray      # (10, V, 3)
    keypoint_index: np.ndarray   # (J,)
    faces: np.ndarray            # (F, 3)
    side: str = "right"
    keypoint_version: str = KEYPOINT_VERSION

    def __post_init__(self):
        v = len(self.template)
        if self.weights.shape != (v, NUM_JOINTS):
            raise InvalidInputError("skinning weights must be (V, 16)")
        if np.any(self.weights < 0) or not np.allclose(self.weights.sum(1), 1.0, atol=1e-6):
            raise InvalidInputError("skinning weights must be non-negative with unit row sums")
        if self.parents[0] != -1 or np.any(self.parents[1:] >= np.arange(1, NUM_JOINTS)):
            raise InvalidInputError("kinematic tree must be rooted with parents before children")
        if self.shape_basis.shape != (SHAPE_DIM, v, 3):
            raise InvalidInputError("shape basis must be (10, V, 3)")
        k = np.asarray(self.keypoint_index)
        if k.size == 0 or k.min() < 0 or k.max() >= v:
            raise InvalidInputError("keypoint indices out of range")

    @property
    def num_vertices(self):
        return len(self.template)

    @property
    def num_keypoints(self):
        return len(self.keypoint_index)

    @property
    def joints_rest(self):
        return self.joint_regressor @ self.template

    def with_keypoints(self, index):
        return HandModel(self.template, self.weights, self.parents, self.joint_regressor,
                         self.shape_basis, np.asarray(index, dtype=np.int64), self.faces,
                         self.side, self.keypoint_version)


@dataclass
class HandParams:
    """Pose ``theta`` (N, 51) and sequence-constant shape ``beta`` (10,)."""
    theta: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64).reshape(-1, POSE_DIM)
        self.beta = np.asarray(self.beta, dtype=np.float64).reshape(SHAPE_DIM)
        if not (np.all(np.isfinite(self.theta)) and np.all(np.isfinite(self.beta))):
            raise InvalidInputError("hand parameters must be finite")

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros((n, POSE_DIM)), np.zeros(SHAPE_DIM))


@dataclass
class HandMotion:
    """Keypoints ``H`` and direction vectors ``D`` for both hands.

    Both arrays are (2, N, J, 3) with hand 0 = left, hand 1 = right, expressed
    in the object's canonical frame in metres.
    """
    H: np.ndarray
    D: np.ndarray

    def __post_init__(self):
        self.H = np.asarray(self.H, dtype=np.float64)
        self.D = np.asarray(self.D, dtype=np.float64)
        if self.H.shape != self.D.shape or self.H.ndim != 4 or self.H.shape[0] != 2:
            raise InvalidInputError("H and D must both be (2, N, J, 3)")

    @property
    def num_frames(self):
        return self.H.shape[1]


# ---------------------------------------------------------------------------
# procedural model

def _ring_frame(d):
    d = d / np.linalg.norm(d)
    up = np.array([0.0, 0.0, 1.0]) - d[2] * d
    up /= np.linalg.norm(up)
    return d, up, np.cross(d, up)


def farthest_point_sampling(points, k, start=0):
    """Greedy farthest-point subset of size ``k``; deterministic for a given start."""
    n = len(points)
    if k > n:
        raise InvalidInputError(f"cannot pick {k} keypoints from {n} vertices")
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = start
    dist = np.linalg.norm(points - points[start], axis=1)
    for i in range(1, k):
        chosen[i] = int(np.argmax(dist))
        dist = np.minimum(dist, np.linalg.norm(points - points[chosen[i]], axis=1))
    return chosen


def build_default_hand(side="right", num_keypoints=128):
    """~800-vertex, 16-joint hand with hand-authored skinning weights."""
    verts, weights, faces = [], [], []
    ring_center, finger_of = [], []
    count = 0

    def add_ring(center, frame, r_a, r_b, npts, w, finger):
        nonlocal count
        d, up, side_ax = frame
        ang = 2 * np.pi * np.arange(npts) / npts
        pts = center + np.outer(r_a * np.cos(ang), side_ax) + np.outer(r_b * np.sin(ang), up)
        verts.append(pts)
        weights.append(np.repeat(w[None], npts, axis=0))
        ring_center.append(np.repeat(center[None], npts, axis=0))
        finger_of.extend([finger] * npts)
        idx = np.arange(count, count + npts)
        count += npts
        return idx

    def tube(a, b):
        a2, b2 = np.roll(a, -1), np.roll(b, -1)
        faces.append(np.concatenate([np.stack([a, a2, b2], 1), np.stack([a, b2, b], 1)]))

    def one_hot(j, p=None, wp=0.0):
        w = np.zeros(NUM_JOINTS)
        w[j] = 1.0 - wp
        if p is not None and wp > 0:
            w[p] = wp
        return w

    # palm: elliptical tube from the wrist towards the knuckles, skinned to the wrist
    palm_frame = _ring_frame(np.array([1.0, 0.0, 0.0]))
    rings = []
    for x in np.linspace(0.0, 0.080, 7):
        half_w = 0.030 + 0.012 * x / 0.090
        rings.append(add_ring(np.array([x, 0.0, 0.0]), palm_frame, half_w, 0.013, 16,
                              one_hot(0), -1))
    for a, b in zip(rings[:-1], rings[1:]):
        tube(a, b)
    verts.append(np.array([[-0.006, 0.0, 0.0]]))
    weights.append(one_hot(0)[None])
    ring_center.append(np.zeros((1, 3)))
    finger_of.append(-1)
    cap = count
    count += 1
    faces.append(np.stack([rings[0], np.full(16, cap), np.roll(rings[0], -1)], 1))

    bases, dirs = [], []
    for f, name in enumerate(FINGERS):
        base, direction, lengths, radius = _FINGER_LAYOUT[name]
        base = np.array(base)
        frame = _ring_frame(np.array(direction, dtype=float))
        d = frame[0]
        bases.append(base)
        dirs.append(d)
        finger_rings = []
        start = base.copy()
        for s, length in enumerate(lengths):
            j = 1 + 3 * f + s
            p = PARENTS[j]
            r = radius * 0.88 ** s
            for t, wp in ((0.0, 0.5), (1 / 3, 0.15), (2 / 3, 0.0)):
                finger_rings.append(add_ring(start + t * length * d, frame, r, r * 0.9, 14,
                                             one_hot(j, p, wp), f))
            start = start + length * d
        tip_r = radius * 0.88 ** 2
        finger_rings.append(add_ring(start, frame, tip_r, tip_r * 0.9, 14, one_hot(1 + 3 * f + 2), f))
        for a, b in zip(finger_rings[:-1], finger_rings[1:]):
            tube(a, b)
        verts.append((start + 0.7 * tip_r * d)[None])
        weights.append(one_hot(1 + 3 * f + 2)[None])
        ring_center.append(start[None])
        finger_of.append(f)
        tip = count
        count += 1
        last = finger_rings[-1]
        faces.append(np.stack([last, np.roll(last, -1), np.full(14, tip)], 1))

    template = np.concatenate(verts)
    W = np.concatenate(weights)
    centers = np.concatenate(ring_center)
    finger_of = np.array(finger_of)
    faces = np.concatenate(faces).astype(np.int64)

    # joint regressor: mean of the ring placed exactly on each joint
    reg = np.zeros((NUM_JOINTS, len(template)))
    reg[0, rings[0]] = 1.0 / len(rings[0])
    for j in range(1, NUM_JOINTS):
        f, s = (j - 1) // 3, (j - 1) % 3
        base, direction, lengths, _ = _FINGER_LAYOUT[FINGERS[f]]
        dvec = _ring_frame(np.array(direction, dtype=float))[0]
        pos = np.array(base) + sum(lengths[:s]) * dvec
        sel = np.flatnonzero((finger_of == f) & np.all(np.isclose(centers, pos, atol=1e-12), axis=1))
        reg[j, sel] = 1.0 / len(sel)

    basis = np.zeros((SHAPE_DIM, len(template), 3))
    on_finger = finger_of >= 0
    basis[0] = 0.05 * template
    basis[1, :, 1] = 0.05 * template[:, 1]
    radial = template - centers
    basis[3, on_finger] = 0.10 * radial[on_finger]
    basis[3, ~on_finger, 2] = 0.10 * template[~on_finger, 2]
    for f in range(5):
        sel = finger_of == f
        along = ((template[sel] - bases[f]) @ dirs[f])[:, None] * dirs[f]
        basis[2, sel] = 0.05 * along
        basis[4 + f, sel] = 0.08 * along
        basis[9, sel, 0] = 0.05 * bases[f][0]
    basis[9, ~on_finger, 0] = 0.05 * template[~on_finger, 0]

    if side == "left":
        template = template * [1.0, -1.0, 1.0]
        basis = basis * [1.0, -1.0, 1.0]
        faces = faces[:, [0, 2, 1]]
    elif side != "right":
        raise InvalidInputError("side must be 'left' or 'right'")
    kp = farthest_point_sampling(template, num_keypoints)
    return HandModel(template, W, PARENTS.copy(), reg, basis, kp, faces, side)


def save_hand_model(path, model):
    """JSON header + binary arrays (container kind ``hand_model``)."""
    arrays = {"template": model.template, "weights": model.weights,
              "parents": model.parents.astype(np.int64),
              "joint_regressor": model.joint_regressor, "shape_basis": model.shape_basis,
              "keypoint_index": model.keypoint_index.astype(np.int64),
              "faces": model.faces.astype(np.int64)}
    meta = {"side": model.side, "keypoint_version": model.keypoint_version,
            "num_joints": NUM_JOINTS, "pose_dim": POSE_DIM, "shape_dim": SHAPE_DIM}
    container.save(path, "hand_model", arrays, meta, HAND_MODEL_SCHEMA)


def load_hand_model(path):
    """Load a hand model file; also the hook for externally converted MANO-format data."""
    meta, a = container.load(path, "hand_model", HAND_MODEL_SCHEMA)
    return HandModel(a["template"], a["weights"], a["parents"], a["joint_regressor"],
                     a["shape_basis"], a["keypoint_index"], a["faces"], meta["side"],
                     meta["keypoint_version"])


# ---------------------------------------------------------------------------
# forward pass (torch, differentiable)

def batch_rodrigues(r):
    """Axis-angle (..., 3) to rotation matrices (..., 3, 3); smooth at zero."""
    sq = (r * r).sum(-1)[..., None, None]
    small = sq < 1e-10
    th2 = torch.where(small, torch.ones_like(sq), sq)
    th = torch.sqrt(th2)
    a = torch.where(small, 1.0 - sq / 6.0, torch.sin(th) / th)
    b = torch.where(small, 0.5 - sq / 24.0, (1.0 - torch.cos(th)) / th2)
    zero = torch.zeros_like(r[..., 0])
    k = torch.stack([zero, -r[..., 2], r[..., 1],
                     r[..., 2], zero, -r[..., 0],
                     -r[..., 1], r[..., 0], zero], -1).reshape(r.shape[:-1] + (3, 3))
    eye = torch.eye(3, dtype=r.dtype, device=r.device)
    return eye + a * k + b * (k @ k)


class TorchHand:
    """Tensor copy of a :class:`HandModel` for batched, differentiable skinning."""

    def __init__(self, model, dtype=torch.float64):
        self.model = model
        t = lambda x: torch.as_tensor(np.asarray(x), dtype=dtype)
        self.template = t(model.template)
        self.weights = t(model.weights)
        self.regressor = t(model.joint_regressor)
        self.shape_basis = t(model.shape_basis)
        self.keypoint_index = torch.as_tensor(model.keypoint_index, dtype=torch.long)
        self.parents = [int(p) for p in model.parents]
        self.dtype = dtype
        self.joint_template = self.regressor @ self.template
        self.joint_basis = torch.einsum("jv,kvc->kjc", self.regressor, self.shape_basis)

    def vertices(self, theta, beta, index=None):
        """theta (B, 51), beta (10,) or (B, 10) -> vertices (B, V, 3).

        ``index`` restricts skinning to a subset of vertices.
        """
        if theta.ndim != 2 or theta.shape[1] != POSE_DIM:
            raise InvalidInputError("theta must be (B, 51)")
        if beta.shape[-1] != SHAPE_DIM:
            raise InvalidInputError("beta must have 10 entries")
        b = theta.shape[0]
        beta = beta.expand(b, SHAPE_DIM) if beta.ndim == 1 else beta
        template, basis, weights = self.template, self.shape_basis, self.weights
        if index is not None:
            template, basis, weights = template[index], basis[:, index], weights[index]
        v_shaped = template + torch.einsum("bk,kvc->bvc", beta, basis)
        joints = self.joint_template + torch.einsum("bk,kjc->bjc", beta, self.joint_basis)
        local = batch_rodrigues(theta[:, 3:].reshape(b, NUM_JOINTS, 3))
        # affine maps x -> M x + c, composed so the zero pose is exactly the identity
        offs = joints - (local @ joints[..., None])[..., 0]
        mats, cons = [local[:, 0]], [offs[:, 0]]
        for j in range(1, NUM_JOINTS):
            p = self.parents[j]
            mats.append(mats[p] @ local[:, j])
            cons.append((mats[p] @ offs[:, j, :, None])[..., 0] + cons[p])
        r_v = torch.einsum("vj,bjmn->bvmn", weights, torch.stack(mats, 1))
        t_v = torch.einsum("vj,bjm->bvm", weights, torch.stack(cons, 1))
        return (r_v @ v_shaped[..., None])[..., 0] + t_v + theta[:, None, :3]

    def keypoints(self, verts):
        return verts[:, self.keypoint_index]

    def keypoint_positions(self, theta, beta):
        """Keypoints directly, skinning only the sampled vertices."""
        return self.vertices(theta, beta, self.keypoint_index)


def lbs_forward(model, theta, beta):
    """Numpy convenience wrapper: theta (51,) or (B, 51) -> vertices (V, 3) or (B, V, 3)."""
    th = np.asarray(theta, dtype=np.float64)
    single = th.ndim == 1
    if th.shape[-1] != POSE_DIM:
        raise InvalidInputError("theta must have 51 entries per frame")
    be = np.asarray(beta, dtype=np.float64)
    if be.shape[-1] != SHAPE_DIM:
        raise InvalidInputError("beta must have 10 entries")
    with torch.no_grad():
        out = TorchHand(model).vertices(torch.as_tensor(th.reshape(-1, POSE_DIM)),
                                        torch.as_tensor(be)).numpy()
    return out[0] if single else out


def sample_keypoints(model, vertices):
    """Gather the model's fixed keypoint subset from (..., V, 3) vertices."""
    v = np.asarray(vertices)
    if v.shape[-2] != model.num_vertices:
        raise InvalidInputError("vertex count does not match the hand model")
    return v[..., model.keypoint_index, :]


def direction_vectors(keypoints, object_vertices, index=None):
    """Vector from each keypoint to its nearest object vertex: (J, 3)."""
    index = index if index is not None else NearestIndex(object_vertices)
    _, _, vec = index.query(keypoints)
    return vec


# ---------------------------------------------------------------------------
# fitting

@dataclass
class FitReport:
    history: list = field(default_factory=list)
    rmse: float = float("nan")
    max_error: float = float("nan")
    iterations: int = 0


def _kabsch(src, dst):
    """Rotation R and translation t minimizing ||R src + t - dst||."""
    cs, cd = src.mean(0), dst.mean(0)
    h = (src - cs).T @ (dst - cd)
    u, _, vt = np.linalg.svd(h)
    s = np.diag([1.0, 1.0, np.sign(np.linalg.det(vt.T @ u.T))])
    r = vt.T @ s @ u.T
    return r, cd - r @ cs


def initial_params(model, keypoints):
    """Root-only initialization by rigid alignment of the rest keypoints per frame."""
    kp = np.asarray(keypoints, dtype=np.float64)
    rest = model.template[model.keypoint_index]
    j0 = model.joints_rest[0]
    theta = np.zeros((len(kp), POSE_DIM))
    for i, target in enumerate(kp):
        r, t = _kabsch(rest, target)
        theta[i, 3:6] = matrix_to_axis_angle(r)
        # skinning rotates about the wrist joint: x -> R (x - j0) + j0 + trans
        theta[i, :3] = t + r @ j0 - j0
    return HandParams(theta, np.zeros(SHAPE_DIM))


def _lm_step(jt, jb, r, lam, theta=None, prior=0.0):
    """Damped Gauss-Newton step using the per-frame block structure.

    jt (N, M, 51), jb (N, M, 10), r (N, M).  Frames couple only through the
    shared shape, which is solved by a Schur complement.  ``prior`` adds the
    residuals ``prior * theta[:, 6:]`` (finger joints pulled toward rest).
    """
    h_tt = jt.transpose(0, 2, 1) @ jt
    h_tb = jt.transpose(0, 2, 1) @ jb
    h_bb = np.einsum("nmi,nmj->ij", jb, jb)
    g_t = np.einsum("nmi,nm->ni", jt, r)
    if prior:
        w2 = prior * prior
        h_tt[:, 6:, 6:] += w2 * np.eye(POSE_DIM - 6)
        g_t[:, 6:] += w2 * theta[:, 6:]
    g_b = np.einsum("nmi,nm->i", jb, r)
    d_t = np.diagonal(h_tt, axis1=1, axis2=2)
    a_t = h_tt + lam * (np.eye(POSE_DIM) * (d_t[:, None, :] + 1e-9))
    a_b = h_bb + lam * np.diag(np.diag(h_bb) + 1e-9)
    inv_g = np.linalg.solve(a_t, g_t[..., None])[..., 0]
    inv_h = np.linalg.solve(a_t, h_tb)
    schur = a_b - np.einsum("nib,nic->bc", h_tb, inv_h)
    rhs = -g_b + np.einsum("nib,ni->b", h_tb, inv_g)
    d_b = np.linalg.solve(schur, rhs)
    d_th = -inv_g - inv_h @ d_b
    return d_th, d_b


def fit_params(model, keypoints, iterations=300, tol=1e-12, init=None, prior=0.0):
    """Least-squares fit of pose and shared shape to target keypoints (N, J, 3).

    Rigid per-frame initialization, then Levenberg-Marquardt on the keypoint
    residuals.  Only steps that lower the cost are accepted, so the recorded
    history is non-increasing.  Returns ``(HandParams, FitReport)``.

    With sparse keypoints some finger joints are barely observed and drift
    without bound on noisy targets; ``prior`` (metres per radian) adds a weak
    pull of the finger angles toward rest.  Zero gives the plain fit.
    """
    target = np.asarray(keypoints, dtype=np.float64)
    if target.ndim != 3 or target.shape[1:] != (model.num_keypoints, 3):
        raise InvalidInputError("keypoints must be (N, J, 3) matching the model")
    if not np.all(np.isfinite(target)):
        raise InvalidInputError("target keypoints contain NaN or inf")
    if prior < 0:
        raise InvalidInputError("prior must be >= 0")
    n = len(target)
    hand = TorchHand(model)
    tgt = target.reshape(n, -1)
    init = init or initial_params(model, target)
    theta, beta = init.theta.copy(), init.beta.copy()

    def single(th, be):
        return hand.keypoint_positions(th[None], be)[0].reshape(-1)

    jac = vmap(jacfwd(single, argnums=(0, 1)), in_dims=(0, None))

    def residual(th, be):
        with torch.no_grad():
            kp = hand.keypoint_positions(torch.as_tensor(th), torch.as_tensor(be))
        return kp.numpy().reshape(n, -1) - tgt

    def objective(r, th):
        return float(((r ** 2).sum() + prior * prior * (th[:, 6:] ** 2).sum()) / r.size)

    r = residual(theta, beta)
    cost = objective(r, theta)
    history = [cost]
    lam, its = 1e-3, 0
    for its in range(1, iterations + 1):
        jt, jb = jac(torch.as_tensor(theta), torch.as_tensor(beta))
        jt, jb = jt.numpy(), jb.numpy()
        accepted = False
        while lam < 1e10:
            d_th, d_b = _lm_step(jt, jb, r, lam, theta, prior)
            th_new, be_new = theta + d_th, beta + d_b
            r_new = residual(th_new, be_new)
            c_new = objective(r_new, th_new)
            if np.isfinite(c_new) and c_new < cost:
                accepted = True
                break
            lam *= 4.0
        if not accepted:
            break
        rel = (cost - c_new) / max(cost, 1e-300)
        theta, beta, r, cost = th_new, be_new, r_new, c_new
        history.append(cost)
        lam = max(lam / 3.0, 1e-9)
        if rel < tol or cost < 1e-24:
            break
    params = HandParams(theta, beta)
    err = np.linalg.norm(r.reshape(n, -1, 3), axis=-1)
    # history: per-coordinate objective (prior included), reported as RMS per keypoint
    report = FitReport([float(np.sqrt(3.0 * h)) for h in history],
                       float(np.sqrt((err ** 2).mean())), float(err.max()), its)
    return params, report


def rigid_params(model, rotation, wrist_position, n_frames=1):
    """Pose that places the rest hand with ``rotation`` and its wrist joint at a point."""
    j0 = model.joints_rest[0]
    theta = np.zeros((n_frames, POSE_DIM))
    theta[:, 3:6] = matrix_to_axis_angle(np.asarray(rotation))
    theta[:, :3] = np.asarray(wrist_position) - j0
    return HandParams(theta, np.zeros(SHAPE_DIM))


def shaped_wrist(model, beta):
    return model.joint_regressor[0] @ (model.template + np.tensordot(beta, model.shape_basis, 1))


def compose_root(model, params, rotation, translation=None):
    """Apply ``x -> Q x + s`` on top of each frame's pose (Q (3, 3) or (N, 3, 3))."""
    th = params.theta.copy()
    n = len(th)
    q = np.broadcast_to(np.asarray(rotation, dtype=np.float64), (n, 3, 3))
    s = np.zeros((n, 3)) if translation is None else np.broadcast_to(translation, (n, 3))
    j0 = shaped_wrist(model, params.beta)
    th[:, 3:6] = matrix_to_axis_angle(q @ axis_angle_to_matrix(th[:, 3:6]))
    th[:, :3] = np.einsum("nij,nj->ni", q, j0 + th[:, :3]) + s - j0
    return HandParams(th, params.beta.copy())
