import numpy as np
import pytest

from artihoi.geometry import BOTTOM, TOP, ArticulatedObject, Mesh, ObjectTrajectory
from artihoi.hand import build_default_hand
from artihoi.shapes import box, icosphere


def winding_number(vertices, faces, points):
    """Generalized winding number (solid angle sum / 4 pi); independent containment oracle."""
    a = vertices[faces[:, 0]][None] - points[:, None]
    b = vertices[faces[:, 1]][None] - points[:, None]
    c = vertices[faces[:, 2]][None] - points[:, None]
    la, lb, lc = (np.linalg.norm(x, axis=-1) for x in (a, b, c))
    det = np.einsum("pfi,pfi->pf", a, np.cross(b, c))
    den = (la * lb * lc + np.einsum("pfi,pfi->pf", a, b) * lc
           + np.einsum("pfi,pfi->pf", b, c) * la + np.einsum("pfi,pfi->pf", c, a) * lb)
    return 2.0 * np.arctan2(det, den).sum(axis=1) / (4.0 * np.pi)


def brute_nearest(query, ref):
    d = np.linalg.norm(np.asarray(query)[:, None] - np.asarray(ref)[None], axis=-1)
    idx = np.argmin(d, axis=1)
    return idx, d[np.arange(len(idx)), idx]


def two_box_object(spacing=0.02, opening=np.pi):
    tv, tf = box([0.01, -0.03, -0.05], [0.2, -0.01, 0.05], spacing)
    bv, bf = box([0.01, 0.01, -0.05], [0.2, 0.08, 0.05], spacing)
    v = np.concatenate([tv, bv])
    f = np.concatenate([tf, bf + len(tv)])
    pid = np.concatenate([np.full(len(tv), TOP), np.full(len(bv), BOTTOM)])
    return ArticulatedObject(Mesh(v, f, pid), opening, "box")


def random_traj(rng, n, articulate=True):
    g = np.concatenate([rng.normal(size=(n, 3)) * 0.5, rng.normal(size=(n, 3)) * 0.3], 1)
    a = np.sort(rng.uniform(0, 1.5, n)) if articulate else np.zeros(n)
    return ObjectTrajectory(g, a)


@pytest.fixture(scope="session")
def obj():
    return two_box_object()


@pytest.fixture(scope="session")
def sphere():
    v, f = icosphere(3, 0.1)
    return Mesh(v, f)


@pytest.fixture(scope="session")
def models():
    return build_default_hand("left", 32), build_default_hand("right", 32)


@pytest.fixture(scope="session")
def right_hand(models):
    return models[1]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
