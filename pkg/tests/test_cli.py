import json

import numpy as np
import pytest

from artihoi import pipeline as P
from artihoi.cli import main
from artihoi.metrics import validate_metrics_json
from artihoi.synthetic import load_scene

CONFIG = """seed = 2
[features]
k = 8
num_keypoints = 32
[diffusion]
train_steps = 5
hidden = [16, 16]
[refine]
fit_iterations = 5
refine_iterations = 2
"""


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "cfg.toml").write_text(CONFIG)
    return d


def run(work, *argv):
    return main([argv[0], "--config", str(work / "cfg.toml"), *map(str, argv[1:])])


def test_full_cli_flow(work, monkeypatch, capsys):
    monkeypatch.setenv(P.CACHE_ENV, str(work / "cache"))
    w = work
    assert run(w, "gen", "--family", "mixed", "--frames", 6, "--count", 3, "--out", w / "scenes") == 0
    scenes = sorted((w / "scenes").iterdir())
    assert [s.name for s in scenes] == ["box_00002.ahoi", "cylinder_00003.ahoi",
                                        "scissors_00004.ahoi"]
    sc = scenes[0]
    assert load_scene(sc).num_frames == 6

    for variant in ("np-bps", "npa-bps", "u-bps"):
        assert run(w, "features", sc, "--variant", variant, "--out", w / f"{variant}.ahoi") == 0
    assert run(w, "contact", sc, "--out", w / "gt_contact.ahoi") == 0

    for which in ("contact", "motion"):
        assert run(w, "train", which, "--scenes", w / "scenes", "--dropout", 0.5,
                   "--out", w / f"{which}.ckpt") == 0
    assert run(w, "contact", sc, "--model", w / "contact.ckpt", "--out", w / "c.ahoi") == 0

    models = ["--contact-model", w / "contact.ckpt", "--motion-model", w / "motion.ckpt"]
    assert run(w, "sample", sc, *models, "--lambda-f", 0.5, "--out", w / "m.ahoi") == 0
    assert run(w, "sample", sc, *models, "--seed", 9, "--no-guidance", "--out", w / "m2.ahoi") == 0
    assert run(w, "refine", sc, w / "m.ahoi", "--weights", "100,10,1000",
               "--out", w / "r.ahoi", "--report", w / "rep.json") == 0
    assert json.loads((w / "rep.json").read_text())["status"] == "ok"
    assert run(w, "metrics", sc, w / "r.ahoi", w / "m2.ahoi", "--csv", w / "m.csv",
               "--json", w / "m.json") == 0
    data = json.loads((w / "m.json").read_text())
    validate_metrics_json(data)
    assert len(data["rows"]) == 2 and np.isfinite(data["rows"][0]["metrics"]["Mul (cm)"])
    assert run(w, "export", sc, w / "r.ahoi", "--out", w / "frames") == 0
    assert len(list((w / "frames").glob("*.obj"))) == 6
    assert run(w, "run", sc, *models, "--weights", "100,10,1000", "--out", w / "run") == 0
    assert {"motion.ahoi", "metrics.json", "manifest.json"} <= {p.name for p in (w / "run").iterdir()}
    capsys.readouterr()


def test_cli_errors(work, tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        run(work, "refine", "nope.ahoi", "nope.ahoi", "--weights", "1,2", "--out", tmp_path / "x")
    assert exc.value.code == 2
    capsys.readouterr()
    assert run(work, "features", tmp_path / "missing.ahoi", "--out", tmp_path / "f") == 2
    assert "error" in capsys.readouterr().err
    (tmp_path / "bad.json").write_text('{"unknown": 1}')
    assert main(["gen", "--config", str(tmp_path / "bad.json"), "--out", str(tmp_path)]) == 2


def test_cli_deterministic(work, tmp_path):
    for d in ("a", "b"):
        assert run(work, "gen", "--family", "box", "--frames", 4, "--out", tmp_path / d) == 0
    a, b = (sorted((tmp_path / d).iterdir())[0].read_bytes() for d in ("a", "b"))
    assert a == b
