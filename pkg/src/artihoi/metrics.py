"""Evaluation metrics for generated hand motion.

Hand vertices are canonical-frame arrays ``(H, N, V, 3)`` (or ``(N, V, 3)``
for one hand).  Distances are reported in centimetres and rates in percent.
"""
import csv
import io
import json
from dataclasses import asdict, dataclass

import numpy as np

from .contact import derived_contact
from .container import atomic_write_bytes
from .geometry import InvalidInputError, NearestIndex, ObjectFrames

CONTACT_EPS = 0.005
ARTICULATION_EPS = 1e-3
COLUMNS = {"mul": "Mul (cm)", "accel": "Accel (cm/s^2)", "pen_1cm": "Pen 1cm (%)",
           "pen_5mm": "Pen 5mm (%)", "con": "Con (%)", "art": "Art (%)", "cm_l1": "CM (cm)"}


def _hands(v):
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 3:
        v = v[None]
    if v.ndim != 4 or v.shape[-1] != 3:
        raise InvalidInputError("hand vertices must be (N, V, 3) or (H, N, V, 3)")
    if v.shape[1] == 0:
        raise InvalidInputError("motion has no frames")
    return v


def multimodality(samples):
    """Mean over sample pairs of the mean per-vertex distance, in cm."""
    s = np.asarray(samples, dtype=np.float64)
    if len(s) < 2:
        raise InvalidInputError("multimodality needs at least two samples")
    flat = s.reshape(len(s), -1, 3)
    total, pairs = 0.0, 0
    for i in range(len(flat)):
        d = np.linalg.norm(flat[i + 1:] - flat[i], axis=-1).mean(axis=1)
        total += d.sum()
        pairs += len(d)
    return float(100.0 * total / pairs)


def accel(vertices, fps):
    """Mean second-difference magnitude times fps^2, in cm/s^2."""
    v = _hands(vertices)
    if v.shape[1] < 3:
        return 0.0
    a = v[:, 2:] - 2.0 * v[:, 1:-1] + v[:, :-2]
    return 100.0 * float(np.linalg.norm(a, axis=-1).mean()) * fps * fps


def _frames(obj_or_frames, angles):
    if isinstance(obj_or_frames, ObjectFrames):
        return obj_or_frames
    return ObjectFrames(obj_or_frames, angles)


def penetration_frames(vertices, frames, threshold):
    """Boolean per frame: some hand vertex is inside at depth >= ``threshold``."""
    v = _hands(vertices)
    out = np.zeros(v.shape[1], dtype=bool)
    for i in range(v.shape[1]):
        pts = v[:, i].reshape(-1, 3)
        inside = frames.contains(i, pts)
        if inside.any():
            _, depth, _ = frames.nearest(i, pts[inside])
            out[i] = bool(np.any(depth >= threshold))
    return out


def pen_pct(vertices, obj, angles=None, threshold=0.01):
    frames = _frames(obj, angles)
    return 100.0 * float(penetration_frames(vertices, frames, threshold).mean())


def contact_frames(vertices, frames, eps=CONTACT_EPS):
    v = _hands(vertices)
    out = np.zeros(v.shape[1], dtype=bool)
    for i in range(v.shape[1]):
        _, d, _ = frames.nearest(i, v[:, i].reshape(-1, 3))
        out[i] = bool(d.min() <= eps)
    return out


def con_pct(vertices, obj, angles=None, eps=CONTACT_EPS):
    """Percentage of frames where any hand vertex is within ``eps`` of an object vertex."""
    frames = _frames(obj, angles)
    return 100.0 * float(contact_frames(vertices, frames, eps).mean())


def art_pct(vertices, obj, angles, eps=CONTACT_EPS, min_change=ARTICULATION_EPS):
    """Contact with the top part among articulating frames.

    Returns ``(percentage, defined)``.  With no articulating frames the value
    is 100 and ``defined`` is False.
    """
    v = _hands(vertices)
    a = np.asarray(angles, dtype=np.float64).reshape(-1)
    if len(a) != v.shape[1]:
        raise InvalidInputError("one articulation angle per frame is required")
    moving = np.zeros(len(a), dtype=bool)
    moving[1:] = np.abs(np.diff(a)) > min_change
    if not moving.any():
        return 100.0, False
    top = obj.top_mask
    cache = {}
    hits = 0
    for i in np.flatnonzero(moving):
        key = float(a[i])
        if key not in cache:
            cache[key] = NearestIndex(obj.articulate(key)[top])
        _, d, _ = cache[key].query(v[:, i].reshape(-1, 3))
        hits += bool(d.min() <= eps)
    return 100.0 * hits / int(moving.sum()), True


def cm_l1(keypoints, predicted, anchors):
    """Mean |(norm of derived contact) - (norm of predicted contact)| in cm.

    ``keypoints`` (H, N, J, 3), ``predicted`` (H, N, M, 3), ``anchors`` (N, M, 3).
    """
    kp = _hands(keypoints)
    pred = np.asarray(predicted, dtype=np.float64)
    pred = pred[None] if pred.ndim == 3 else pred
    if pred.shape[:2] != kp.shape[:2] or pred.shape[2:] != np.shape(anchors)[1:]:
        raise InvalidInputError("predicted contact must be (H, N, M, 3) aligned with keypoints")
    diffs = [np.abs(np.linalg.norm(derived_contact(kp[h], anchors), axis=-1)
                    - np.linalg.norm(pred[h], axis=-1)) for h in range(len(kp))]
    return 100.0 * float(np.mean(diffs))


@dataclass
class MetricsReport:
    mul: float = float("nan")
    accel: float = float("nan")
    pen_1cm: float = float("nan")
    pen_5mm: float = float("nan")
    con: float = float("nan")
    art: float = float("nan")
    cm_l1: float = float("nan")
    fps: float = 30.0
    art_defined: bool = True

    def row(self):
        return {COLUMNS[k]: getattr(self, k) for k in COLUMNS}

    def to_json(self):
        return {"metrics": self.row(), "fps": self.fps, "art_defined": self.art_defined,
                "raw": asdict(self)}


def evaluate(vertices, obj, angles, fps, keypoints=None, predicted=None, anchors=None,
             samples=None, frames=None):
    """All metrics for one motion; ``samples`` (S, ...) enables Mul, contact inputs enable CM."""
    frames = frames or ObjectFrames(obj, angles)
    art, defined = art_pct(vertices, obj, angles)
    rep = MetricsReport(accel=accel(vertices, fps),
                        pen_1cm=pen_pct(vertices, frames, threshold=0.01),
                        pen_5mm=pen_pct(vertices, frames, threshold=0.005),
                        con=con_pct(vertices, frames), art=art, fps=fps, art_defined=defined)
    if samples is not None and len(samples) > 1:
        rep.mul = multimodality(samples)
    if keypoints is not None and predicted is not None and anchors is not None:
        rep.cm_l1 = cm_l1(keypoints, predicted, anchors)
    return rep


def aggregate(reports):
    """Mean of each metric over reports, ignoring NaN entries."""
    out = MetricsReport(fps=reports[0].fps if reports else 30.0,
                        art_defined=all(r.art_defined for r in reports))
    for k in COLUMNS:
        vals = [getattr(r, k) for r in reports if np.isfinite(getattr(r, k))]
        setattr(out, k, float(np.mean(vals)) if vals else float("nan"))
    return out


def write_csv(path, reports, names=None):
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["name", *COLUMNS.values()])
    for i, r in enumerate(reports):
        w.writerow([names[i] if names else str(i), *(repr(float(v)) for v in r.row().values())])
    atomic_write_bytes(path, buf.getvalue().encode("utf-8"))


def write_json(path, reports, names=None):
    data = {"columns": list(COLUMNS.values()),
            "rows": [dict(name=names[i] if names else str(i), **r.to_json())
                     for i, r in enumerate(reports)]}
    atomic_write_bytes(path, json.dumps(data, indent=2).encode("utf-8"))


def validate_metrics_json(data):
    """Minimal schema check for files written by :func:`write_json`."""
    if set(data) != {"columns", "rows"} or data["columns"] != list(COLUMNS.values()):
        raise InvalidInputError("metrics JSON: unexpected top-level layout")
    for row in data["rows"]:
        for col in COLUMNS.values():
            v = row["metrics"][col]
            if not isinstance(v, (int, float)):
                raise InvalidInputError(f"metrics JSON: {col} is not numeric")
            if col.endswith("(%)") and np.isfinite(v) and not 0.0 <= v <= 100.0:
                raise InvalidInputError(f"metrics JSON: {col} outside [0, 100]")
    return True
