import numpy as np
import pytest
import torch

from artihoi.geometry import ArticulatedObject, BOTTOM, Mesh, ObjectFrames, TOP
from artihoi.hand import HandParams
from artihoi.refine import (RefineConfig, RefineObjective, RefinementDiverged, l_acc, l_pen, l_proj,
                            refine, safe_norm, _acc_terms, _pen_terms, _proj_terms)
from artihoi.shapes import icosphere
from artihoi.geometry import InvalidInputError

from conftest import brute_nearest, two_box_object


def sphere_object(radius=0.1, sub=3):
    v, f = icosphere(sub, radius)
    top = v[:, 1] < 0
    # two hemispheres share one closed surface: part ids only label vertices
    return ArticulatedObject(Mesh(v, f, np.where(top, TOP, BOTTOM)), 0.0)


@pytest.fixture(scope="module")
def sph():
    o = sphere_object()
    return o, ObjectFrames(o, np.zeros(3))


def test_config_validation():
    assert RefineConfig().weights == (100.0, 10.0, 1000.0) and RefineConfig().iterations == 100
    with pytest.raises(InvalidInputError):
        RefineConfig(w_pen=-1)
    with pytest.raises(InvalidInputError):
        RefineConfig(iterations=-1)


def test_l_proj(sph, rng):
    o, fr = sph
    v = o.articulate(0.0)
    kp = v[rng.integers(0, len(v), (3, 20))]
    assert l_proj(kp, np.zeros_like(kp), fr) == 0.0
    d = np.zeros_like(kp)
    d[0, 0] = [0.0, 0.0, 0.0]
    p = kp.copy()
    p[1, 2] = v[7] * 1.5
    assert l_proj(p, d, fr) == pytest.approx(np.linalg.norm(v[7] * 0.5))
    q = rng.normal(size=(3, 20, 3)) * 0.1
    dq = rng.normal(size=(3, 20, 3)) * 0.01
    expect = sum(brute_nearest(q[i] + dq[i], v)[1].sum() for i in range(3))
    assert abs(l_proj(q, dq, fr) - expect) <= 1e-12


def test_l_pen(sph):
    o, fr = sph
    v = o.articulate(0.0)
    assert l_pen(np.full((3, 5, 3), 0.5), fr) == 0.0
    centre = np.zeros((1, 1, 3))
    _, d = brute_nearest(centre[0], v)
    assert l_pen(centre, ObjectFrames(o, [0.0])) == pytest.approx(d[0], abs=1e-15)
    n = v[0] / np.linalg.norm(v[0])
    shallow = l_pen((0.09 * n)[None, None], ObjectFrames(o, [0.0]))
    deep = l_pen((0.08 * n)[None, None], ObjectFrames(o, [0.0]))
    assert 0 < shallow < deep


def test_l_acc():
    static = np.ones((6, 4, 3))
    assert l_acc(static) == 0
    lin = np.arange(6.0)[:, None, None] * np.array([1.0, 2.0, 3.0]) + np.zeros((6, 4, 3))
    assert l_acc(lin) == pytest.approx(0.0, abs=1e-12)
    quad = np.zeros((5, 1, 3))
    quad[:, 0, 0] = np.arange(5.0) ** 2
    assert l_acc(quad) == pytest.approx(2.0 * 3)


def test_safe_norm_grad():
    x = torch.zeros(2, 3, requires_grad=True)
    safe_norm(x).sum().backward()
    assert torch.all(x.grad == 0)


def _fd_check(f, x, rng, h=1e-6):
    xt = torch.tensor(x, requires_grad=True)
    f(xt).backward()
    u = rng.normal(size=x.shape)
    with torch.no_grad():
        fd = (f(torch.tensor(x + h * u)) - f(torch.tensor(x - h * u))) / (2 * h)
    g = float((xt.grad.numpy() * u).sum())
    return abs(g - float(fd)) / max(abs(float(fd)), 1e-12)


def test_loss_gradients_fd(models, rng):
    o = two_box_object()
    fr = ObjectFrames(o, [0.2, 0.3, 0.4])
    model = models[1]
    beta = rng.normal(0, 0.3, 10)
    errs = {"proj": [], "pen": [], "acc": []}
    for _ in range(5):
        th = np.zeros((3, 51))
        th[:, :3] = [0.1, 0.03, 0.0] + rng.normal(0, 0.005, (3, 3))
        th[:, 3:] = rng.normal(0, 0.2, (3, 48))
        d_hat = rng.normal(0, 0.01, (1, 3, model.num_keypoints, 3))
        obj = RefineObjective([model], [beta], d_hat, fr, RefineConfig())
        x0 = th.reshape(-1)
        # freeze assignments and interior set at x0, as within one optimizer evaluation
        verts0, kp0 = obj.geometry(torch.tensor(th[None]))
        with torch.no_grad():
            p0 = (kp0 + obj.d_hat).numpy()
        tgt = np.stack([fr.vertices(i)[fr.nearest(i, p0[0, i])[0]] for i in range(3)])[None]
        v0 = verts0.detach().numpy()
        inside = np.stack([fr.contains(i, v0[0, i]) for i in range(3)])[None]
        ptgt = np.zeros_like(v0)
        for i in range(3):
            if inside[0, i].any():
                ptgt[0, i][inside[0, i]] = fr.vertices(i)[fr.nearest(i, v0[0, i][inside[0, i]])[0]]

        def proj(x):
            _, kp = obj.geometry(x.reshape(1, 3, 51))
            return safe_norm(kp + obj.d_hat - torch.tensor(tgt)).sum()

        def pen(x):
            v, _ = obj.geometry(x.reshape(1, 3, 51))
            d = safe_norm(v - torch.tensor(ptgt))
            return torch.where(torch.tensor(inside), d, torch.zeros_like(d)).sum()

        def acc(x):
            v, _ = obj.geometry(x.reshape(1, 3, 51))
            return _acc_terms(v)

        # the frozen-set versions agree with the library terms at x0
        with torch.no_grad():
            t = torch.tensor(th[None])
            v, kp = obj.geometry(t)
            assert float(proj(t.reshape(-1))) == pytest.approx(float(_proj_terms(kp, obj.d_hat, fr)))
            assert float(pen(t.reshape(-1))) == pytest.approx(float(_pen_terms(v, fr)[0]))
        errs["proj"].append(_fd_check(proj, x0, rng))
        errs["acc"].append(_fd_check(acc, x0, rng))
        if inside.any():
            errs["pen"].append(_fd_check(pen, x0, rng))
    assert max(errs["proj"]) < 1e-3 and max(errs["acc"]) < 1e-3
    assert errs["pen"] and max(errs["pen"]) < 1e-3


def test_objective_gradient_matches_terms(models, rng):
    o = two_box_object()
    fr = ObjectFrames(o, [0.0, 0.0])
    th = np.zeros((2, 51))
    th[:, :3] = [0.1, 0.05, 0.0]
    obj = RefineObjective([models[1]], [np.zeros(10)], np.zeros((1, 2, 32, 3)), fr, RefineConfig())
    f, g = obj(th.reshape(-1))
    assert g.shape == (102,) and np.isfinite(f)
    assert f == obj.last["objective"]
    exact = 100 * obj.last["proj"] + 10 * obj.last["pen"] + 1000 * obj.last["acc"]
    assert obj.last["total"] == pytest.approx(exact)
    # the smoothed acceleration never exceeds the exact one
    assert f <= obj.last["total"] + 1e-12


def _pushed_scene(models, rng, n=8):
    from artihoi.synthetic import SyntheticSpec, gen_synthetic
    scene = gen_synthetic(SyntheticSpec("box", n, 11), models)
    params = []
    for p in scene.hand_params:
        th = p.theta.copy()
        th[:, :3] += rng.normal(0, 0.01 / np.sqrt(3), (n, 3))
        params.append(HandParams(th, p.beta))
    return scene, params


def test_refine_reduces_interior_count(models):
    from artihoi.synthetic import SyntheticSpec, gen_synthetic, hand_motion, hand_vertices
    scene = gen_synthetic(SyntheticSpec("box", 6, 3), models)
    fr = ObjectFrames(scene.obj, scene.traj.a)
    # the left hand rests on the static base; push it 5 mm into the box along the contact normal
    p = scene.hand_params[0]
    v = hand_vertices(models[:1], [p])[0, 0]
    _, dist, vec = fr.nearest(0, v)
    i = np.argmin(dist)
    th = p.theta.copy()
    th[:, :3] += 0.005 * vec[i] / np.linalg.norm(vec[i]) + vec[i]
    pushed = [HandParams(th, p.beta)]

    def interior(ps):
        v = hand_vertices(models[:1], ps)
        return sum(int(fr.contains(i, v[:, i].reshape(-1, 3)).sum()) for i in range(len(fr)))

    D = hand_motion(scene, models, fr).D[:1]
    before = interior(pushed)
    res = refine(models[:1], pushed, D, scene.obj, scene.traj.a, RefineConfig(iterations=30),
                 frames=fr)
    assert before > 0 and interior(res.params) < before
    h = res.report["history"]
    assert all(b["objective"] <= a["objective"] for a, b in zip(h, h[1:]))
    assert res.report["final"]["total"] <= res.report["initial"]["total"]
    assert {"config", "frames", "history", "runtime_s", "status"} <= set(res.report)


def test_zero_weights_unchanged(models, rng):
    scene, params = _pushed_scene(models, rng, 4)
    cfg = RefineConfig(w_proj=0, w_pen=0, w_acc=0)
    res = refine(models, params, np.zeros((2, 4, 32, 3)), scene.obj, scene.traj.a, cfg)
    for a, b in zip(res.params, params):
        assert np.array_equal(a.theta, b.theta) and np.array_equal(a.beta, b.beta)


def test_divergence_reported(models, rng, monkeypatch):
    import artihoi.refine as R
    scene, params = _pushed_scene(models, rng, 4)

    def boom(*a, **k):
        raise FloatingPointError("objective exceeded 10x initial")
    monkeypatch.setattr(R, "lbfgs_descent", boom)
    with pytest.raises(RefinementDiverged) as exc:
        refine(models, params, np.zeros((2, 4, 32, 3)), scene.obj, scene.traj.a)
    assert exc.value.report["status"] == "diverged"


def test_frame_mismatch(models, rng):
    scene, params = _pushed_scene(models, rng, 4)
    with pytest.raises(InvalidInputError):
        refine(models, params, np.zeros((2, 4, 32, 3)), scene.obj, scene.traj.a[:3])
