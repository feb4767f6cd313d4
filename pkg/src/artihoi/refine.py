"""Physical refinement of fitted hand poses.

Three terms over the canonical-frame hand motion:

* projection: keypoints plus generated direction vectors should land on the
  object; sum of nearest-vertex distances.
* penetration: sum over hand vertices inside the object of their distance to
  the nearest object vertex.
* acceleration: sum of second-difference norms of all hand vertices.

Nearest-vertex assignments and the interior set are recomputed on every
evaluation and held fixed for that evaluation's gradient.  Only the pose is
optimized; shape stays at its fitted value.

The acceleration norm has a kink at zero, which stalls quasi-Newton steps on
motions that are already smooth.  The optimizer therefore sees
``sqrt(|a|^2 + eps^2) - eps`` with ``eps`` around a millimetre (``acc_smoothing``);
reports carry both that surrogate (``objective``) and the exact weighted sum
(``total``).
"""
import json
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .container import atomic_write_bytes
from .geometry import InvalidInputError, ObjectFrames
from .hand import POSE_DIM, HandParams, TorchHand
from .optim import adaptive_descent, lbfgs_descent


@dataclass(frozen=True)
class RefineConfig:
    w_proj: float = 100.0
    w_pen: float = 10.0
    w_acc: float = 1000.0
    iterations: int = 100
    lr: float = 1e-3
    divergence: float = 10.0
    optimizer: str = "lbfgs"
    acc_smoothing: float = 1e-3

    def __post_init__(self):
        if min(self.w_proj, self.w_pen, self.w_acc) < 0:
            raise InvalidInputError("refinement weights must be >= 0")
        if self.acc_smoothing < 0:
            raise InvalidInputError("acc_smoothing must be >= 0")
        if self.iterations < 0:
            raise InvalidInputError("iterations must be >= 0")
        if self.optimizer not in ("lbfgs", "adaptive"):
            raise InvalidInputError("optimizer must be 'lbfgs' or 'adaptive'")

    @property
    def weights(self):
        return (self.w_proj, self.w_pen, self.w_acc)


class RefinementDiverged(RuntimeError):
    def __init__(self, message, report):
        super().__init__(message)
        self.report = report


def safe_norm(x):
    """Row norm whose gradient is zero (not NaN) at the origin."""
    sq = (x * x).sum(-1)
    pos = sq > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))),
                       torch.zeros_like(sq))


def _as_hands(x):
    """Accept (N, P, 3) or (H, N, P, 3); return a 4-D array."""
    x = np.asarray(x, dtype=np.float64)
    return x[None] if x.ndim == 3 else x


def _proj_terms(kp, d_hat, frames):
    p = kp + d_hat
    target = np.empty(p.shape)
    pts = p.detach().numpy()
    for i in range(p.shape[1]):
        idx, _, _ = frames.nearest(i, pts[:, i].reshape(-1, 3))
        target[:, i] = frames.vertices(i)[idx].reshape(pts[:, i].shape)
    return safe_norm(p - torch.as_tensor(target)).sum()


def _pen_terms(verts, frames):
    v = verts.detach().numpy()
    mask = np.zeros(v.shape[:-1], dtype=bool)
    target = np.zeros(v.shape)
    for i in range(v.shape[1]):
        flat = v[:, i].reshape(-1, 3)
        inside = frames.contains(i, flat)
        if inside.any():
            idx, _, _ = frames.nearest(i, flat[inside])
            t = np.zeros_like(flat)
            t[inside] = frames.vertices(i)[idx]
            target[:, i] = t.reshape(v[:, i].shape)
        mask[:, i] = inside.reshape(v.shape[0], v.shape[2])
    m = torch.as_tensor(mask)
    d = safe_norm(verts - torch.as_tensor(target))
    return torch.where(m, d, torch.zeros_like(d)).sum(), int(mask.sum())


def _acc_terms(verts, eps=0.0):
    if verts.shape[1] < 3:
        return verts.sum() * 0.0
    d = verts[:, 2:] - 2.0 * verts[:, 1:-1] + verts[:, :-2]
    if eps > 0:
        return (torch.sqrt((d * d).sum(-1) + eps * eps) - eps).sum()
    return safe_norm(d).sum()


def l_proj(keypoints, d_hat, frames):
    """Projection term for keypoints (N, J, 3) or (H, N, J, 3) against :class:`ObjectFrames`."""
    with torch.no_grad():
        return float(_proj_terms(torch.as_tensor(_as_hands(keypoints)),
                                 torch.as_tensor(_as_hands(d_hat)), frames))


def l_pen(vertices, frames):
    with torch.no_grad():
        return float(_pen_terms(torch.as_tensor(_as_hands(vertices)), frames)[0])


def l_acc(vertices):
    with torch.no_grad():
        return float(_acc_terms(torch.as_tensor(_as_hands(vertices))))


class RefineObjective:
    """Weighted objective over the stacked poses ``theta`` of all hands, shape (H, N, 51)."""

    def __init__(self, models, betas, d_hat, frames, cfg):
        self.hands = [TorchHand(m) for m in models]
        self.betas = [torch.as_tensor(np.asarray(b, dtype=np.float64)) for b in betas]
        self.d_hat = torch.as_tensor(_as_hands(d_hat))
        self.frames = frames
        self.cfg = cfg
        self.n = len(frames)
        self.last = {}

    def shape(self):
        return (len(self.hands), self.n, POSE_DIM)

    def geometry(self, theta):
        verts = torch.stack([h.vertices(theta[k], self.betas[k]) for k, h in enumerate(self.hands)])
        kp = torch.stack([h.keypoints(verts[k]) for k, h in enumerate(self.hands)])
        return verts, kp

    def terms(self, theta):
        """Tensors (proj, pen, smoothed acc), the exact acc value and the interior count."""
        verts, kp = self.geometry(theta)
        proj = _proj_terms(kp, self.d_hat, self.frames) if self.cfg.w_proj else verts.sum() * 0.0
        pen, count = _pen_terms(verts, self.frames)
        acc = _acc_terms(verts, self.cfg.acc_smoothing)
        with torch.no_grad():
            exact = float(_acc_terms(verts)) if self.cfg.acc_smoothing else float(acc)
        return proj, pen, acc, exact, count

    def __call__(self, x, grad=True):
        theta = torch.tensor(np.reshape(x, self.shape()), requires_grad=grad)
        with torch.set_grad_enabled(grad):
            proj, pen, acc, acc_exact, count = self.terms(theta)
            wp, wn, wa = self.cfg.weights
            objective = wp * proj + wn * pen + wa * acc
        value = float(objective.detach())
        p, n = float(proj.detach()), float(pen.detach())
        self.last = {"objective": value, "total": wp * p + wn * n + wa * acc_exact,
                     "proj": p, "pen": n, "acc": acc_exact, "interior": count}
        if not grad:
            return value, None
        objective.backward()
        return value, theta.grad.numpy().reshape(-1).copy()


@dataclass
class RefineResult:
    params: list
    report: dict = field(default_factory=dict)


def refine(models, params, d_hat, obj, angles, cfg=RefineConfig(), frames=None):
    """Refine per-hand :class:`HandParams` (list aligned with ``models``).

    ``d_hat`` is (H, N, J, 3) direction vectors from the sampler and
    ``angles`` the per-frame articulation.  Returns refined parameters and a
    report with per-iteration terms.  Raises :class:`RefinementDiverged` if
    the objective exceeds ``cfg.divergence`` times its initial value.
    """
    if len(models) != len(params):
        raise InvalidInputError("one parameter set per hand model is required")
    frames = frames or ObjectFrames(obj, angles)
    n = len(frames)
    for p in params:
        if p.theta.shape != (n, POSE_DIM):
            raise InvalidInputError("hand parameters must cover every frame")
    objective = RefineObjective(models, [p.beta for p in params], d_hat, frames, cfg)
    x0 = np.stack([p.theta for p in params]).reshape(-1)
    t0 = time.perf_counter()
    history = []
    f0, _ = objective(x0, grad=True)
    history.append(dict(objective.last, iteration=0))

    def log(it, x, f):
        history.append(dict(objective.last, iteration=it + 1))

    report = {"config": {k: getattr(cfg, k) for k in cfg.__dataclass_fields__},
              "frames": n, "history": history}
    if cfg.iterations == 0 or max(cfg.weights) == 0:
        res_x = x0
    else:
        try:
            if cfg.optimizer == "adaptive":
                res = adaptive_descent(objective, x0, cfg.iterations, lr=cfg.lr,
                                       callback=log, divergence=cfg.divergence)
            else:
                res = lbfgs_descent(objective, x0, cfg.iterations, callback=log,
                                    divergence=cfg.divergence)
        except FloatingPointError as exc:
            report["runtime_s"] = time.perf_counter() - t0
            report["status"] = "diverged"
            raise RefinementDiverged(str(exc), report) from exc
        res_x = res.x
    theta = np.reshape(res_x, objective.shape())
    out = [HandParams(theta[k].copy(), p.beta.copy()) for k, p in enumerate(params)]
    report.update(status="ok", runtime_s=time.perf_counter() - t0,
                  initial=history[0], final=history[-1])
    return RefineResult(out, report)


def write_report(path, report):
    atomic_write_bytes(path, json.dumps(report, indent=2, sort_keys=True).encode("utf-8"))
