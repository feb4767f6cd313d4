"""Contact maps between anchor vertices on the object and a hand point set.

A contact map stores, for each anchor ``v_k``, the vector ``h* - v_k`` to the
nearest hand point.  Its norm is the scalar contact distance.  Maps are kept
per hand with shape ``(2, N, M, 3)``; hand 0 is the left hand.
"""
from dataclasses import dataclass

import numpy as np

from . import container
from .geometry import InvalidInputError, NearestIndex

CONTACT_KIND = "contact_maps"


@dataclass(frozen=True)
class ContactMap:
    vectors: np.ndarray          # (2, N, M, 3)
    anchors: np.ndarray          # (N, M, 3) canonical, metres

    def __post_init__(self):
        v, a = np.asarray(self.vectors), np.asarray(self.anchors)
        if v.ndim != 4 or v.shape[0] != 2 or v.shape[-1] != 3:
            raise InvalidInputError("contact vectors must be (2, N, M, 3)")
        if a.shape != v.shape[1:]:
            raise InvalidInputError("anchors must be (N, M, 3) matching the vectors")
        if not (np.all(np.isfinite(v)) and np.all(np.isfinite(a))):
            raise InvalidInputError("contact map contains NaN or inf")

    @property
    def distances(self):
        return np.linalg.norm(self.vectors, axis=-1)


def _nearest_vectors(points, anchors):
    points = np.asarray(points, dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.float64)
    if points.ndim != 3 or anchors.ndim != 3 or len(points) != len(anchors):
        raise InvalidInputError("expected (N, P, 3) hand points and (N, M, 3) anchors")
    if points.shape[1] == 0:
        raise InvalidInputError("hand point set is empty")
    out = np.empty(anchors.shape)
    assign = np.empty(anchors.shape[:2], dtype=np.int64)
    for i in range(len(points)):
        idx, _, vec = NearestIndex(points[i]).query(anchors[i])
        out[i], assign[i] = vec, idx
    return out, assign


def gt_contact(hand_vertices, anchors):
    """(N, V, 3) hand surface and (N, M, 3) anchors -> (N, M, 3) vectors."""
    return _nearest_vectors(hand_vertices, anchors)[0]


def derived_contact(keypoints, anchors, return_assignment=False):
    """Same as :func:`gt_contact` with the sparse keypoints as the hand set."""
    vec, assign = _nearest_vectors(keypoints, anchors)
    return (vec, assign) if return_assignment else vec


def contact_discrepancy(c_hat, keypoints, anchors):
    """Sum of per-anchor norms ``||C~ - C^||`` and its gradient w.r.t. the keypoints.

    Leading dimensions beyond ``(N, ...)`` are allowed, e.g. ``(2, N, M, 3)``
    for both hands.  The nearest-keypoint assignment is frozen for this
    evaluation, so the gradient is a subgradient at assignment boundaries.
    Returns ``(value, grad)`` with ``grad`` shaped like ``keypoints``.
    """
    c_hat = np.asarray(c_hat, dtype=np.float64)
    kp = np.asarray(keypoints, dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.float64)
    lead = kp.shape[:-3]
    if c_hat.shape[:-3] != lead or c_hat.shape[-3:] != anchors.shape[-3:] \
            or kp.shape[-3] != anchors.shape[-3] or kp.shape[-1] != 3:
        raise InvalidInputError(
            f"shape mismatch: contact {c_hat.shape}, keypoints {kp.shape}, anchors {anchors.shape}")
    kp_f = kp.reshape((-1,) + kp.shape[-3:])
    c_f = c_hat.reshape((-1,) + c_hat.shape[-3:])
    grad = np.zeros_like(kp_f)
    total = 0.0
    for h in range(len(kp_f)):
        vec, assign = derived_contact(kp_f[h], anchors, return_assignment=True)
        r = vec - c_f[h]
        norm = np.linalg.norm(r, axis=-1)
        total += float(norm.sum())
        unit = np.divide(r, norm[..., None], out=np.zeros_like(r), where=norm[..., None] > 0)
        frames = np.broadcast_to(np.arange(len(assign))[:, None], assign.shape)
        np.add.at(grad[h], (frames, assign), unit)
    return total, grad.reshape(kp.shape)


def densify_contact(anchor_points, values, vertices):
    """Scalar per mesh vertex, taken from the nearest anchor."""
    anchor_points = np.asarray(anchor_points, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if len(anchor_points) != len(values):
        raise InvalidInputError("one value per anchor is required")
    idx, _, _ = NearestIndex(anchor_points).query(vertices)
    return values[idx]


def dense_contact_distance(vertices, hand_points):
    """Ground-truth scalar map: distance from every mesh vertex to the nearest hand point."""
    _, d, _ = NearestIndex(hand_points).query(vertices)
    return d


def save_contact(path, cmap, meta=None):
    arrays = {"left": cmap.vectors[0], "right": cmap.vectors[1], "anchors": cmap.anchors}
    container.save(path, CONTACT_KIND, arrays, meta or {})


def load_contact(path):
    meta, arr = container.load(path, kind=CONTACT_KIND, schema_version=1)
    return ContactMap(np.stack([arr["left"], arr["right"]]), arr["anchors"]), meta
