"""End-to-end chain: features, contact sampling, motion sampling, fitting,
refinement, metrics and export.

Per-frame sample layouts used by the two diffusion models:

* contact model: ``[left (2K, 3) | right (2K, 3)]`` flattened, 12K channels.
* motion model: ``[left (J, 6) | right (J, 6)]`` with ``[H | D]`` per keypoint.
* object condition: ``[O (2K, 3) | G (6) | s_o]``.
"""
import functools
import hashlib
import json
import os
import platform
import sys
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch

from . import __version__, container, kernels
from .contact import gt_contact
from .diffusion import GuidanceConfig, TrainConfig, contact_guidance_step, sample, train_denoiser
from .features import BpsFeatures, encode, global_states, VARIANTS
from .geometry import BOTTOM, TOP, InvalidInputError, ObjectFrames, pose_object, write_obj_groups
from .hand import HandParams, build_default_hand, fit_params
from .metrics import evaluate, multimodality, write_csv, write_json
from .refine import RefineConfig, refine, write_report
from .synthetic import hand_motion, hand_vertices, world_vertices

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

CACHE_ENV = "ARTIHOI_CACHE_DIR"
FEATURES_KIND = "features"
MOTION_KIND = "motion"
STAGES = ("features", "contact", "motion", "fit", "refine")


def cache_dir():
    d = os.environ.get(CACHE_ENV) or os.path.join(os.path.expanduser("~"), ".cache", "artihoi")
    os.makedirs(d, exist_ok=True)
    return d


@dataclass(frozen=True)
class PipelineConfig:
    # features
    variant: str = "np-bps"
    k: int = 512
    num_keypoints: int = 128
    bps_seed: int = 0
    d_margin: float = 0.15
    # diffusion
    T: int = 50
    lambda_f: float = 0.5
    p_f: float = 0.5
    contact_guidance: bool = True
    use_contact: bool = True
    train_steps: int = 2000
    batch_size: int = 32
    lr: float = 1e-3
    ema_decay: float = 0.995
    hidden: tuple = (512, 512)
    smooth: int = 5
    context: bool = False
    # fitting and refinement
    fit_iterations: int = 300
    fit_prior: float = 0.02
    w_proj: float = 100.0
    w_pen: float = 10.0
    w_acc: float = 1000.0
    refine_iterations: int = 100
    refine_optimizer: str = "lbfgs"
    # evaluation
    contact_eps: float = 0.005
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise InvalidInputError(f"variant must be one of {VARIANTS}")
        object.__setattr__(self, "hidden", tuple(self.hidden))
        if self.fit_prior < 0:
            raise InvalidInputError("fit_prior must be >= 0")
        GuidanceConfig(self.lambda_f, self.contact_guidance, self.p_f)
        self.refine_config()

    def refine_config(self):
        return RefineConfig(self.w_proj, self.w_pen, self.w_acc, self.refine_iterations,
                            optimizer=self.refine_optimizer)

    def guidance(self, contact_guidance=None):
        cg = self.contact_guidance if contact_guidance is None else contact_guidance
        return GuidanceConfig(self.lambda_f, cg, self.p_f)

    def train_config(self, seed=None):
        return TrainConfig(steps=self.train_steps, batch_size=self.batch_size, lr=self.lr,
                           ema_decay=self.ema_decay, p_f=self.p_f,
                           seed=self.seed if seed is None else seed, T=self.T)

    def replace(self, **kw):
        d = asdict(self)
        d.update(kw)
        return PipelineConfig(**d)

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


def config_from_dict(data):
    """Flatten one level of sections (e.g. ``[refine]``) and build a config."""
    flat = {}
    for key, value in data.items():
        if isinstance(value, dict):
            flat.update(value)
        else:
            flat[key] = value
    known = {f.name for f in fields(PipelineConfig)}
    unknown = sorted(set(flat) - known)
    if unknown:
        raise InvalidInputError(f"unknown config keys: {', '.join(unknown)}")
    return PipelineConfig(**flat)


def load_config(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if str(path).endswith(".toml"):
        data = tomllib.loads(raw.decode("utf-8"))
    elif str(path).endswith(".json"):
        data = json.loads(raw)
    else:
        raise InvalidInputError("config must be a .toml or .json file")
    return config_from_dict(data)


def config_hash(cfg):
    return hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def stage_seed(master, stage):
    """Independent 32-bit seed for a named stage, derived from the master seed."""
    ss = np.random.SeedSequence([int(master) & 0xFFFFFFFF, STAGES.index(stage)])
    return int(ss.generate_state(1)[0])


@functools.lru_cache(maxsize=8)
def hand_models(num_keypoints=128):
    return (build_default_hand("left", num_keypoints), build_default_hand("right", num_keypoints))


# ---------------------------------------------------------------------------
# features

@dataclass
class SceneFeatures:
    bps: BpsFeatures
    anchors: np.ndarray       # (N, 2K, 3) canonical metres
    cond: np.ndarray          # (N, C)


def scene_hash(scene):
    h = hashlib.sha256()
    for a in (scene.obj.mesh.vertices, scene.obj.mesh.faces, scene.obj.mesh.part_id,
              scene.traj.g, scene.traj.a):
        h.update(np.ascontiguousarray(a).tobytes())
    h.update(repr(float(scene.obj.opening_angle)).encode())
    return h.hexdigest()


def object_condition(bps, traj):
    n = bps.num_frames
    return np.concatenate([bps.offsets.reshape(n, -1), global_states(traj),
                           np.full((n, 1), bps.scale)], axis=1)


def scene_features(scene, cfg, use_cache=True):
    """Object encoding for a scene, read from or written to the feature cache."""
    key = hashlib.sha256(f"{scene_hash(scene)}|{cfg.variant}|{cfg.k}|{cfg.bps_seed}|"
                         f"{cfg.d_margin!r}|v1".encode()).hexdigest()[:24]
    path = os.path.join(cache_dir(), "features", f"{key}.ahoi")
    bps = None
    if use_cache and os.path.exists(path):
        meta, arr = container.load(path, kind=FEATURES_KIND, schema_version=1)
        bps = BpsFeatures(arr["offsets"], arr["vertex_index"], float(meta["scale"]),
                          meta["variant"], tuple(meta["layout"]))
    if bps is None:
        bps = encode(cfg.variant, scene.traj, scene.obj, cfg.k, cfg.bps_seed, cfg.d_margin)
        if use_cache:
            save_features(path, bps)
    anchors = bps.anchors(scene.obj, scene.traj)
    return SceneFeatures(bps, anchors, object_condition(bps, scene.traj))


def save_features(path, bps, contact=None):
    arrays = {"offsets": bps.offsets, "vertex_index": bps.vertex_index}
    if contact is not None:
        arrays["contact_left"], arrays["contact_right"] = contact[0], contact[1]
    container.save(path, FEATURES_KIND, arrays,
                   {"scale": bps.scale, "variant": bps.variant, "layout": list(bps.layout)})


def load_features(path):
    meta, arr = container.load(path, kind=FEATURES_KIND, schema_version=1)
    bps = BpsFeatures(arr["offsets"], arr["vertex_index"], float(meta["scale"]),
                      meta["variant"], tuple(meta["layout"]))
    contact = None
    if "contact_left" in arr:
        contact = np.stack([arr["contact_left"], arr["contact_right"]])
    return bps, contact


# ---------------------------------------------------------------------------
# sample layouts

def contact_to_sample(vectors):
    v = np.asarray(vectors)
    return v.transpose(1, 0, 2, 3).reshape(v.shape[1], -1)


def sample_to_contact(x, m):
    x = np.asarray(x)
    return x.reshape(x.shape[0], 2, m, 3).transpose(1, 0, 2, 3)


def motion_to_sample(H, D):
    x = np.concatenate([H, D], axis=-1)            # (2, N, J, 6)
    return x.transpose(1, 0, 2, 3).reshape(x.shape[1], -1)


def sample_to_motion(x, j):
    x = np.asarray(x).reshape(len(x), 2, j, 6).transpose(1, 0, 2, 3)
    return x[..., :3], x[..., 3:]


def gt_contact_maps(scene, models, anchors):
    verts = hand_vertices(models, scene.hand_params)
    return np.stack([gt_contact(verts[h], anchors) for h in range(2)])


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainingSet:
    cond: np.ndarray      # (S, N, C)
    contact: np.ndarray   # (S, N, 12K)
    motion: np.ndarray    # (S, N, 12J)


def build_training_set(scenes, cfg):
    models = hand_models(cfg.num_keypoints)
    cond, contact, motion = [], [], []
    for scene in scenes:
        feats = scene_features(scene, cfg)
        mo = hand_motion(scene, models)
        cond.append(feats.cond)
        contact.append(contact_to_sample(gt_contact_maps(scene, models, feats.anchors)))
        motion.append(motion_to_sample(mo.H, mo.D))
    return TrainingSet(np.stack(cond), np.stack(contact), np.stack(motion))


def train_contact_model(data, cfg, log=None):
    tc = cfg.train_config(stage_seed(cfg.seed, "contact"))
    res = train_denoiser(data.contact, data.cond, None, tc, cfg.hidden, cfg.smooth, log=log,
                         context=cfg.context)
    res.denoiser.meta.update(role="contact", k=cfg.k, variant=cfg.variant)
    return res


def train_motion_model(data, cfg, log=None):
    tc = cfg.train_config(stage_seed(cfg.seed, "motion"))
    res = train_denoiser(data.motion, data.cond, data.contact, tc, cfg.hidden, cfg.smooth, log=log,
                         context=cfg.context)
    res.denoiser.meta.update(role="motion", num_keypoints=cfg.num_keypoints, k=cfg.k,
                             variant=cfg.variant)
    return res


# ---------------------------------------------------------------------------
# sampling

def sample_contact(den, feats, seed, m):
    n = len(feats.cond)
    z = sample(den, den.schedule, (1, n, den.model.x_dim), cond=feats.cond[None],
               guidance=GuidanceConfig(0.0, False), seed=seed)
    return sample_to_contact(den.x_norm.decode(z[0]), m)


def _h_channels(j):
    """Indices of H channels inside one frame of the motion layout."""
    per = np.arange(2 * j * 6).reshape(2, j, 6)
    return per[..., :3]


def make_guide(den, c_hat, anchors, j):
    """Closure applying one contact-guidance step to the H channels of a normalized x0."""
    idx = _h_channels(j)
    mean, std = den.x_norm.mean[idx], den.x_norm.std[idx]

    def guide(pred, t):
        out = pred.copy()
        for b in range(len(pred)):
            h = pred[b][:, idx] * std + mean                  # (N, 2, J, 3)
            h = h.transpose(1, 0, 2, 3)
            h_new, _ = contact_guidance_step(h, c_hat, anchors, std[:, None])
            out[b][:, idx] = (h_new.transpose(1, 0, 2, 3) - mean) / std
        return out

    return guide


def sample_motion(den, feats, c_hat, cfg, seed, contact_guidance=None):
    """Generated (H, D), each (2, N, J, 3), conditioned on a contact map (or none)."""
    n, j = len(feats.cond), cfg.num_keypoints
    guidance = cfg.guidance(contact_guidance)
    contact = contact_to_sample(c_hat)[None] if (cfg.use_contact and c_hat is not None) else None
    guide = None
    if guidance.contact_guidance and c_hat is not None:
        guide = make_guide(den, c_hat, feats.anchors, j)
    z = sample(den, den.schedule, (1, n, den.model.x_dim), cond=feats.cond[None],
               contact=contact, guidance=guidance, seed=seed, guide_fn=guide)
    return sample_to_motion(den.x_norm.decode(z[0]), j)


# ---------------------------------------------------------------------------
# full run

@dataclass
class PipelineResult:
    contact: np.ndarray
    H: np.ndarray
    D: np.ndarray
    fitted: list
    refined: list
    vertices: np.ndarray
    metrics: object
    refine_report: dict
    fit_reports: list
    seeds: dict = field(default_factory=dict)


def fit_motion(models, H, iterations=300, prior=0.0):
    params, reports = [], []
    for model, h in zip(models, H):
        p, r = fit_params(model, h, iterations=iterations, tol=1e-8, prior=prior)
        params.append(p)
        reports.append(r)
    return params, reports


def run_pipeline(scene, contact_den, motion_den, cfg, seed=None, out_dir=None, frames=None,
                 do_refine=True):
    """Run every stage for one scene and one master seed; optionally write artifacts."""
    seed = cfg.seed if seed is None else seed
    seeds = {s: stage_seed(seed, s) for s in STAGES}
    models = hand_models(cfg.num_keypoints)
    feats = scene_features(scene, cfg)
    frames = frames or ObjectFrames(scene.obj, scene.traj.a)
    m = feats.anchors.shape[1]
    c_hat = sample_contact(contact_den, feats, seeds["contact"], m)
    H, D = sample_motion(motion_den, feats, c_hat if cfg.use_contact else None, cfg,
                         seeds["motion"])
    fitted, fit_reports = fit_motion(models, H, cfg.fit_iterations, cfg.fit_prior)
    if do_refine:
        res = refine(models, fitted, D, scene.obj, scene.traj.a, cfg.refine_config(),
                     frames=frames)
        refined, report = res.params, res.report
    else:
        refined, report = fitted, {}
    verts = hand_vertices(models, refined)
    rep = evaluate(verts, scene.obj, scene.traj.a, scene.fps, keypoints=H, predicted=c_hat,
                   anchors=feats.anchors, frames=frames)
    result = PipelineResult(c_hat, H, D, fitted, refined, verts, rep, report, fit_reports, seeds)
    if out_dir is not None:
        write_outputs(out_dir, scene, result, cfg, seed, models)
    return result


def result_arrays(result):
    return {"H": result.H, "D": result.D, "contact": result.contact,
            "theta_fit": np.stack([p.theta for p in result.fitted]),
            "theta": np.stack([p.theta for p in result.refined]),
            "beta": np.stack([p.beta for p in result.refined])}


def save_motion(path, arrays, meta=None):
    """Motion file: generated ``H``, ``D``, ``contact`` and per-hand ``theta``/``beta``."""
    container.save(path, MOTION_KIND, {k: np.asarray(v, dtype="<f8") for k, v in arrays.items()},
                   meta or {})


def load_motion(path):
    return container.load(path, kind=MOTION_KIND, schema_version=1)


def params_from(arrays, key="theta"):
    return [HandParams(arrays[key][h], arrays["beta"][h]) for h in range(len(arrays[key]))]


def versions():
    return {"artihoi": __version__, "numpy": np.__version__, "torch": torch.__version__,
            "python": platform.python_version(), "kernels": kernels.BACKEND}


def write_outputs(out_dir, scene, result, cfg, seed, models):
    os.makedirs(out_dir, exist_ok=True)
    save_motion(os.path.join(out_dir, "motion.ahoi"), result_arrays(result), {"seed": seed})
    write_json(os.path.join(out_dir, "metrics.json"), [result.metrics], ["run"])
    write_csv(os.path.join(out_dir, "metrics.csv"), [result.metrics], ["run"])
    if result.refine_report:
        write_report(os.path.join(out_dir, "refine_report.json"), result.refine_report)
    export_sequence(result.vertices, models, scene.obj, scene.traj, os.path.join(out_dir, "frames"))
    write_manifest(os.path.join(out_dir, "manifest.json"), cfg, seed, result.seeds,
                   {"scene": scene_hash(scene)})


def write_manifest(path, cfg, seed, seeds, extra=None):
    data = {"seed": seed, "stage_seeds": seeds, "config_hash": config_hash(cfg),
            "config": cfg.to_dict(), "versions": versions(), "argv": sys.argv[1:]}
    data.update(extra or {})
    container.atomic_write_bytes(path, json.dumps(data, indent=2, sort_keys=True).encode())


def _part_faces(mesh, part):
    """Vertex selection and re-indexed faces of one part."""
    sel = np.flatnonzero(mesh.part_id == part)
    remap = -np.ones(len(mesh.vertices), dtype=np.int64)
    remap[sel] = np.arange(len(sel))
    f = mesh.faces[mesh.part_id[mesh.faces[:, 0]] == part]
    return sel, remap[f]


def export_sequence(hand_verts, models, obj, traj, path):
    """One OBJ per frame (object parts and both hands, world frame) plus ``index.json``."""
    hv = np.asarray(hand_verts, dtype=np.float64)
    if hv.ndim != 4 or hv.shape[1] == 0:
        raise InvalidInputError("motion to export must be (2, N, V, 3) with N >= 1")
    if hv.shape[1] != len(traj):
        raise InvalidInputError("motion and trajectory frame counts differ")
    os.makedirs(path, exist_ok=True)
    world = world_vertices(hv, traj)
    parts = [_part_faces(obj.mesh, p) for p in (TOP, BOTTOM)]
    files = []
    for i in range(len(traj)):
        v = pose_object(obj, traj.frame(i))
        name = f"frame_{i:05d}.obj"
        write_obj_groups(os.path.join(path, name),
                         [("object_top", v[parts[0][0]], parts[0][1]),
                          ("object_bottom", v[parts[1][0]], parts[1][1]),
                          ("left_hand", world[0, i], models[0].faces),
                          ("right_hand", world[1, i], models[1].faces)])
        files.append(name)
    index = {"frames": files, "num_frames": len(files), "frame": "world",
             "groups": ["object_top", "object_bottom", "left_hand", "right_hand"]}
    container.atomic_write_bytes(os.path.join(path, "index.json"),
                                 json.dumps(index, indent=2).encode())
    return index


def evaluate_trajectory(scene, contact_den, motion_den, cfg, seeds, **kw):
    """Run several seeds on one scene; returns results and Mul over their hand vertices."""
    results = [run_pipeline(scene, contact_den, motion_den, cfg, seed=s, **kw) for s in seeds]
    mul = multimodality(np.stack([r.vertices for r in results])) if len(results) > 1 else 0.0
    for r in results:
        r.metrics.mul = mul
    return results, mul
