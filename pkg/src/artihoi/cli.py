"""Command-line interface.

    artihoi gen --family box --frames 32 --seed 0 --out scenes/
    artihoi features scenes/box_0000.ahoi --variant np-bps --out feats.ahoi
    artihoi contact scenes/box_0000.ahoi --out contact.ahoi
    artihoi train contact --scenes scenes/ --out contact.ckpt
    artihoi train motion --scenes scenes/ --out motion.ckpt --dropout 0.5
    artihoi sample scene.ahoi --contact-model contact.ckpt --motion-model motion.ckpt --out m.ahoi
    artihoi refine scene.ahoi m.ahoi --weights 100,10,1000 --out r.ahoi --report report.json
    artihoi metrics scene.ahoi r.ahoi --csv metrics.csv --json metrics.json
    artihoi export scene.ahoi r.ahoi --out frames/
    artihoi run scene.ahoi --contact-model contact.ckpt --motion-model motion.ckpt --out run/

Shared options: ``--config`` (TOML or JSON), ``--seed``.  The feature cache
lives under ``$ARTIHOI_CACHE_DIR`` (default ``~/.cache/artihoi``).
"""
import argparse
import glob
import json
import logging
import os
import sys

import numpy as np

from . import pipeline as P
from .contact import ContactMap, save_contact
from .diffusion import load_checkpoint, save_checkpoint
from .geometry import InvalidInputError
from .metrics import evaluate, multimodality, write_csv, write_json
from .refine import RefinementDiverged, refine, write_report
from .synthetic import FAMILIES, SyntheticSpec, gen_synthetic, hand_vertices, load_scene, save_scene

log = logging.getLogger("artihoi")


def _weights(text):
    try:
        w = [float(x) for x in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError("weights must be three numbers: w_proj,w_pen,w_acc")
    if len(w) != 3:
        raise argparse.ArgumentTypeError("weights must be three numbers: w_proj,w_pen,w_acc")
    return w


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML or JSON configuration file")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="artihoi", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="generate synthetic scenes")
    g.add_argument("--family", choices=FAMILIES + ("mixed",), default="mixed")
    g.add_argument("--frames", type=int, default=32)
    g.add_argument("--count", type=int, default=1)
    g.add_argument("--spacing", type=float, default=0.008)
    g.add_argument("--out", required=True, help="output directory")

    f = sub.add_parser("features", parents=[common], help="object encoding for a scene")
    f.add_argument("scene")
    f.add_argument("--variant", choices=P.VARIANTS)
    f.add_argument("--k", type=int)
    f.add_argument("--out", required=True)

    c = sub.add_parser("contact", parents=[common],
                       help="contact maps: ground truth from scene hands, or sampled with --model")
    c.add_argument("scene")
    c.add_argument("--model", help="contact checkpoint; omit for ground truth")
    c.add_argument("--out", required=True)

    t = sub.add_parser("train", parents=[common], help="train a denoiser")
    t.add_argument("which", choices=("contact", "motion"))
    t.add_argument("--scenes", required=True, help="directory or glob of scene files")
    t.add_argument("--steps", type=int)
    t.add_argument("--dropout", type=float, help="contact condition dropout p_f")
    t.add_argument("--out", required=True)

    s = sub.add_parser("sample", parents=[common], help="sample contact and motion, then fit hands")
    s.add_argument("scene")
    s.add_argument("--contact-model", required=True)
    s.add_argument("--motion-model", required=True)
    s.add_argument("--lambda-f", type=float)
    s.add_argument("--no-guidance", action="store_true", help="disable contact guidance")
    s.add_argument("--no-contact", action="store_true", help="unconditional on contact")
    s.add_argument("--out", required=True)

    r = sub.add_parser("refine", parents=[common], help="physical refinement of a motion file")
    r.add_argument("scene")
    r.add_argument("motion")
    r.add_argument("--weights", type=_weights, help="w_proj,w_pen,w_acc")
    r.add_argument("--iterations", type=int)
    r.add_argument("--out", required=True)
    r.add_argument("--report")

    m = sub.add_parser("metrics", parents=[common], help="evaluate motion files against a scene")
    m.add_argument("scene")
    m.add_argument("motions", nargs="+", help="one or more motion files (several enable Mul)")
    m.add_argument("--csv")
    m.add_argument("--json")

    e = sub.add_parser("export", parents=[common], help="OBJ per frame plus index.json")
    e.add_argument("scene")
    e.add_argument("motion")
    e.add_argument("--out", required=True)

    u = sub.add_parser("run", parents=[common], help="full pipeline for one scene")
    u.add_argument("scene")
    u.add_argument("--contact-model", required=True)
    u.add_argument("--motion-model", required=True)
    u.add_argument("--lambda-f", type=float)
    u.add_argument("--weights", type=_weights)
    u.add_argument("--out", required=True)
    return p


def _config(args):
    cfg = P.load_config(args.config) if args.config else P.PipelineConfig()
    kw = {}
    if args.seed is not None:
        kw["seed"] = args.seed
    for name, key in (("variant", "variant"), ("k", "k"), ("steps", "train_steps"),
                      ("dropout", "p_f"), ("lambda_f", "lambda_f"),
                      ("iterations", "refine_iterations")):
        v = getattr(args, name, None)
        if v is not None:
            kw[key] = v
    if getattr(args, "weights", None):
        kw.update(zip(("w_proj", "w_pen", "w_acc"), args.weights))
    if getattr(args, "no_guidance", False):
        kw["contact_guidance"] = False
    if getattr(args, "no_contact", False):
        kw["use_contact"] = False
    return cfg.replace(**kw) if kw else cfg


def _scene_paths(spec):
    paths = sorted(glob.glob(os.path.join(spec, "*.ahoi"))) if os.path.isdir(spec) else \
        sorted(glob.glob(spec))
    if not paths:
        raise InvalidInputError(f"no scene files match {spec!r}")
    return paths


def cmd_gen(args, cfg):
    os.makedirs(args.out, exist_ok=True)
    models = P.hand_models(cfg.num_keypoints)
    for i in range(args.count):
        fam = FAMILIES[i % 3] if args.family == "mixed" else args.family
        seed = cfg.seed + i
        scene = gen_synthetic(SyntheticSpec(fam, args.frames, seed, spacing=args.spacing), models)
        path = os.path.join(args.out, f"{fam}_{seed:05d}.ahoi")
        save_scene(path, scene)
        print(path)


def cmd_features(args, cfg):
    scene = load_scene(args.scene)
    feats = P.scene_features(scene, cfg)
    P.save_features(args.out, feats.bps)
    print(f"{args.out}: {feats.bps.variant} offsets {feats.bps.offsets.shape}")


def cmd_contact(args, cfg):
    scene = load_scene(args.scene)
    feats = P.scene_features(scene, cfg)
    if args.model:
        den = load_checkpoint(args.model)
        vec = P.sample_contact(den, feats, P.stage_seed(cfg.seed, "contact"),
                               feats.anchors.shape[1])
        source = "sampled"
    else:
        vec = P.gt_contact_maps(scene, P.hand_models(cfg.num_keypoints), feats.anchors)
        source = "ground_truth"
    save_contact(args.out, ContactMap(vec, feats.anchors), {"source": source})
    print(f"{args.out}: {source} contact {vec.shape}")


def cmd_train(args, cfg):
    scenes = [load_scene(p) for p in _scene_paths(args.scenes)]
    data = P.build_training_set(scenes, cfg)
    fn = P.train_contact_model if args.which == "contact" else P.train_motion_model
    res = fn(data, cfg, log=lambda step, loss: log.info("step %d loss %.5f", step, loss))
    save_checkpoint(args.out, res.denoiser, {"config_hash": P.config_hash(cfg),
                                             "num_scenes": len(scenes)})
    print(f"{args.out}: trained {args.which} model on {len(scenes)} scenes, "
          f"final loss {np.mean(res.losses[-20:]):.5f}")


def _load_models(args):
    return load_checkpoint(args.contact_model), load_checkpoint(args.motion_model)


def cmd_sample(args, cfg):
    scene = load_scene(args.scene)
    cden, mden = _load_models(args)
    feats = P.scene_features(scene, cfg)
    c_hat = P.sample_contact(cden, feats, P.stage_seed(cfg.seed, "contact"), feats.anchors.shape[1])
    H, D = P.sample_motion(mden, feats, c_hat if cfg.use_contact else None, cfg,
                           P.stage_seed(cfg.seed, "motion"))
    fitted, reports = P.fit_motion(P.hand_models(cfg.num_keypoints), H, cfg.fit_iterations, cfg.fit_prior)
    arrays = {"H": H, "D": D, "contact": c_hat, "theta_fit": np.stack([p.theta for p in fitted]),
              "theta": np.stack([p.theta for p in fitted]),
              "beta": np.stack([p.beta for p in fitted])}
    P.save_motion(args.out, arrays, {"seed": cfg.seed, "config_hash": P.config_hash(cfg),
                                     "fit_rmse": [r.rmse for r in reports]})
    print(f"{args.out}: {H.shape[1]} frames, fit RMSE " +
          ", ".join(f"{r.rmse * 1000:.2f} mm" for r in reports))


def cmd_refine(args, cfg):
    scene = load_scene(args.scene)
    meta, arr = P.load_motion(args.motion)
    models = P.hand_models(cfg.num_keypoints)
    try:
        res = refine(models, P.params_from(arr, "theta"), arr["D"], scene.obj, scene.traj.a,
                     cfg.refine_config())
    except RefinementDiverged as exc:
        if args.report:
            write_report(args.report, exc.report)
        raise
    arr = dict(arr)
    arr["theta"] = np.stack([p.theta for p in res.params])
    P.save_motion(args.out, arr, {k: v for k, v in meta.items() if not k.startswith("_")})
    if args.report:
        write_report(args.report, res.report)
    print(f"{args.out}: objective {res.report['initial']['total']:.6g} -> "
          f"{res.report['final']['total']:.6g}")


def cmd_metrics(args, cfg):
    scene = load_scene(args.scene)
    models = P.hand_models(cfg.num_keypoints)
    feats = P.scene_features(scene, cfg)
    reports, verts = [], []
    for path in args.motions:
        _, arr = P.load_motion(path)
        v = hand_vertices(models, P.params_from(arr, "theta"))
        verts.append(v)
        reports.append(evaluate(v, scene.obj, scene.traj.a, scene.fps, keypoints=arr["H"],
                                predicted=arr["contact"], anchors=feats.anchors))
    if len(verts) > 1:
        mul = multimodality(np.stack(verts))
        for r in reports:
            r.mul = mul
    names = [os.path.basename(p) for p in args.motions]
    if args.csv:
        write_csv(args.csv, reports, names)
    if args.json:
        write_json(args.json, reports, names)
    for n, r in zip(names, reports):
        print(n, json.dumps(r.row()))


def cmd_export(args, cfg):
    scene = load_scene(args.scene)
    models = P.hand_models(cfg.num_keypoints)
    _, arr = P.load_motion(args.motion)
    idx = P.export_sequence(hand_vertices(models, P.params_from(arr, "theta")), models,
                            scene.obj, scene.traj, args.out)
    print(f"{args.out}: {idx['num_frames']} frames")


def cmd_run(args, cfg):
    scene = load_scene(args.scene)
    cden, mden = _load_models(args)
    res = P.run_pipeline(scene, cden, mden, cfg, seed=cfg.seed, out_dir=args.out)
    print(json.dumps(res.metrics.row()))


COMMANDS = {"gen": cmd_gen, "features": cmd_features, "contact": cmd_contact, "train": cmd_train,
            "sample": cmd_sample, "refine": cmd_refine, "metrics": cmd_metrics,
            "export": cmd_export, "run": cmd_run}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = _config(args)
        COMMANDS[args.command](args, cfg)
    except (InvalidInputError, OSError, ValueError, RefinementDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
