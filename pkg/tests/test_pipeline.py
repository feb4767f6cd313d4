import json
import os
import time

import numpy as np
import pytest

from artihoi import container, pipeline as P
from artihoi.geometry import InvalidInputError, read_obj_groups
from artihoi.metrics import con_pct, pen_pct, validate_metrics_json
from artihoi.synthetic import (FAMILIES, SyntheticSpec, gen_synthetic, hand_vertices, load_scene,
                               save_scene, world_vertices)

TINY = dict(k=16, num_keypoints=32, train_steps=40, hidden=(32, 32), refine_iterations=5,
            fit_iterations=30)


@pytest.fixture(autouse=True)
def cache(tmp_path_factory, monkeypatch):
    monkeypatch.setenv(P.CACHE_ENV, str(tmp_path_factory.getbasetemp() / "cache"))


@pytest.fixture(scope="module")
def tiny(models):
    cfg = P.PipelineConfig(**TINY)
    scenes = [gen_synthetic(SyntheticSpec(f, 8, 40 + i), models) for i, f in enumerate(FAMILIES)]
    os.environ.setdefault(P.CACHE_ENV, "/tmp/artihoi-test-cache")
    data = P.build_training_set(scenes, cfg)
    return cfg, scenes, P.train_contact_model(data, cfg).denoiser, \
        P.train_motion_model(data, cfg).denoiser


@pytest.mark.parametrize("family", FAMILIES)
def test_synthetic_scene(family, models):
    spec = SyntheticSpec(family, 12, 3)
    s1, s2 = gen_synthetic(spec, models), gen_synthetic(spec, models)
    assert np.array_equal(s1.obj.mesh.vertices, s2.obj.mesh.vertices)
    assert np.array_equal(s1.traj.g, s2.traj.g)
    assert all(np.array_equal(a.theta, b.theta) for a, b in zip(s1.hand_params, s2.hand_params))
    v = hand_vertices(models, s1.hand_params)
    assert con_pct(v, s1.obj, s1.traj.a) == 100
    assert pen_pct(v, s1.obj, s1.traj.a, 0.01) == 0
    # watertight two-part mesh
    from artihoi.geometry import edge_manifold_report
    edge_manifold_report(s1.obj.mesh)


def test_synthetic_spec_validation():
    with pytest.raises(InvalidInputError):
        SyntheticSpec("box", size=0.0)
    with pytest.raises(InvalidInputError):
        SyntheticSpec("sphere")
    with pytest.raises(InvalidInputError):
        SyntheticSpec("box", frames=0)


def test_scene_file_round_trip(models, tmp_path):
    s = gen_synthetic(SyntheticSpec("cylinder", 5, 1), models)
    save_scene(tmp_path / "s.ahoi", s)
    b = load_scene(tmp_path / "s.ahoi")
    assert np.array_equal(b.obj.mesh.vertices, s.obj.mesh.vertices)
    assert np.array_equal(b.traj.g, s.traj.g) and np.array_equal(b.traj.a, s.traj.a)
    assert all(np.array_equal(x.theta, y.theta) for x, y in zip(b.hand_params, s.hand_params))
    assert b.meta["family"] == "cylinder" and b.fps == s.fps


def test_container_errors(tmp_path):
    container.save(tmp_path / "x.ahoi", "scene", {"a": np.arange(3, dtype="<i4")}, {"k": 1})
    meta, arr = container.load(tmp_path / "x.ahoi", "scene", 1)
    assert meta["k"] == 1 and arr["a"].tolist() == [0, 1, 2]
    with pytest.raises(container.FormatError):
        container.load(tmp_path / "x.ahoi", "checkpoint")
    with pytest.raises(container.FormatError):
        container.load(tmp_path / "x.ahoi", "scene", 2)
    (tmp_path / "bad").write_bytes(b"nope" * 8)
    with pytest.raises(container.FormatError):
        container.load(tmp_path / "bad")
    with pytest.raises(container.FormatError):
        container.pack("x", {"a": np.zeros(2, dtype=np.complex64)})


def test_container_layout():
    data = container.pack("k", {"a": np.array([1.5], "<f8")})
    assert data[:4] == b"AHOI"
    hlen = int.from_bytes(data[8:16], "little")
    header = json.loads(data[16:16 + hlen])
    start = ((16 + hlen + 7) & ~7) + header["arrays"][0]["offset"]
    assert np.frombuffer(data[start:start + 8], "<f8")[0] == 1.5


def test_config_files(tmp_path):
    (tmp_path / "c.toml").write_text('seed = 3\n[refine]\nw_acc = 10000.0\n[features]\nk = 64\n')
    cfg = P.load_config(tmp_path / "c.toml")
    assert cfg.seed == 3 and cfg.w_acc == 1e4 and cfg.k == 64
    (tmp_path / "c.json").write_text(json.dumps({"diffusion": {"lambda_f": 0.0}}))
    assert P.load_config(tmp_path / "c.json").lambda_f == 0.0
    (tmp_path / "bad.json").write_text(json.dumps({"nope": 1}))
    with pytest.raises(InvalidInputError):
        P.load_config(tmp_path / "bad.json")
    with pytest.raises(InvalidInputError):
        P.PipelineConfig(variant="x")
    with pytest.raises(InvalidInputError):
        P.PipelineConfig(fit_prior=-0.1)
    assert P.config_hash(cfg) == P.config_hash(P.load_config(tmp_path / "c.toml"))
    assert P.config_hash(cfg) != P.config_hash(cfg.replace(seed=4))


def test_stage_seeds():
    s = {st: P.stage_seed(7, st) for st in P.STAGES}
    assert len(set(s.values())) == len(P.STAGES)
    assert P.stage_seed(7, "motion") == s["motion"] != P.stage_seed(8, "motion")


def test_cache_env(tmp_path, monkeypatch, models):
    monkeypatch.setenv(P.CACHE_ENV, str(tmp_path / "cc"))
    assert P.cache_dir() == str(tmp_path / "cc")
    s = gen_synthetic(SyntheticSpec("box", 3, 0), models)
    cfg = P.PipelineConfig(k=8, num_keypoints=32)
    f1 = P.scene_features(s, cfg)
    assert len(os.listdir(tmp_path / "cc" / "features")) == 1
    f2 = P.scene_features(s, cfg)
    assert np.array_equal(f1.bps.offsets, f2.bps.offsets)
    assert np.array_equal(f1.anchors, f2.anchors)
    assert f1.cond.shape == (3, 2 * 8 * 3 + 7)


def test_layouts_round_trip(rng):
    c = rng.normal(size=(2, 4, 10, 3))
    assert np.array_equal(P.sample_to_contact(P.contact_to_sample(c), 10), c)
    H, D = rng.normal(size=(2, 2, 4, 5, 3))
    h2, d2 = P.sample_to_motion(P.motion_to_sample(H, D), 5)
    assert np.array_equal(h2, H) and np.array_equal(d2, D)


def test_guide_touches_only_keypoint_channels(tiny):
    cfg, scenes, cden, mden = tiny
    feats = P.scene_features(scenes[0], cfg)
    c_hat = P.sample_contact(cden, feats, 0, feats.anchors.shape[1])
    guide = P.make_guide(mden, c_hat, feats.anchors, cfg.num_keypoints)
    x = np.random.default_rng(0).normal(size=(1, 8, mden.model.x_dim))
    y = guide(x, 10)
    h = np.zeros(mden.model.x_dim, bool)
    h[P._h_channels(cfg.num_keypoints).ravel()] = True
    assert np.array_equal(x[..., ~h], y[..., ~h]) and not np.array_equal(x[..., h], y[..., h])


def test_run_pipeline_deterministic(tiny, tmp_path):
    cfg, scenes, cden, mden = tiny
    r1 = P.run_pipeline(scenes[1], cden, mden, cfg, seed=5, out_dir=tmp_path / "a")
    r2 = P.run_pipeline(scenes[1], cden, mden, cfg, seed=5, out_dir=tmp_path / "b")
    for name in ("motion.ahoi", "metrics.json", "metrics.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert np.array_equal(r1.vertices, r2.vertices)
    r3 = P.run_pipeline(scenes[1], cden, mden, cfg, seed=6)
    assert not np.array_equal(r1.H, r3.H)
    assert validate_metrics_json(json.loads((tmp_path / "a" / "metrics.json").read_text()))
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert man["seed"] == 5 and man["config_hash"] == P.config_hash(cfg)
    assert set(man["stage_seeds"]) == set(P.STAGES) and "numpy" in man["versions"]
    rep = json.loads((tmp_path / "a" / "refine_report.json").read_text())
    assert rep["status"] == "ok" and len(rep["history"]) >= 1


def test_without_contact_conditioning(tiny):
    cfg, scenes, cden, mden = tiny
    r = P.run_pipeline(scenes[0], cden, mden, cfg.replace(use_contact=False), seed=1,
                       do_refine=False)
    assert r.H.shape == (2, 8, 32, 3) and np.all(np.isfinite(r.H))


def test_motion_file(tiny, tmp_path):
    cfg, scenes, cden, mden = tiny
    r = P.run_pipeline(scenes[2], cden, mden, cfg, seed=0, do_refine=False)
    P.save_motion(tmp_path / "m.ahoi", P.result_arrays(r), {"seed": 0})
    meta, arr = P.load_motion(tmp_path / "m.ahoi")
    assert meta["seed"] == 0 and np.array_equal(arr["H"], r.H)
    ps = P.params_from(arr)
    assert np.array_equal(ps[1].theta, r.refined[1].theta)


def test_export_sequence(models, tmp_path):
    s = gen_synthetic(SyntheticSpec("scissors", 4, 2), models)
    hv = hand_vertices(models, s.hand_params)
    idx = P.export_sequence(hv, models, s.obj, s.traj, tmp_path / "f")
    assert idx["num_frames"] == 4 and len(os.listdir(tmp_path / "f")) == 5
    g = read_obj_groups(tmp_path / "f" / idx["frames"][2])
    world = world_vertices(hv, s.traj)
    assert np.array_equal(g["right_hand"][0], world[1, 2])
    assert np.array_equal(g["left_hand"][1], models[0].faces)
    assert set(g) == {"object_top", "object_bottom", "left_hand", "right_hand"}
    with pytest.raises(InvalidInputError):
        P.export_sequence(hv[:, :0], models, s.obj, s.traj, tmp_path / "e")


def test_end_to_end_timing(models, tmp_path):
    # a 32-frame scene through every stage at the default refinement budget
    cfg = P.PipelineConfig(k=64, num_keypoints=32, train_steps=20, hidden=(64, 64))
    scene = gen_synthetic(SyntheticSpec("box", 32, 77), models)
    data = P.build_training_set([scene], cfg)
    cden = P.train_contact_model(data, cfg).denoiser
    mden = P.train_motion_model(data, cfg).denoiser
    t = time.perf_counter()
    P.run_pipeline(scene, cden, mden, cfg, seed=0, out_dir=tmp_path)
    assert time.perf_counter() - t < 60
