"""DDPM with clean-sample prediction, classifier-free and contact guidance.

Samples are arrays shaped ``(B, N, D)``: a batch of sequences of ``N`` frames
with ``D`` channels per frame.  A denoiser is any callable
``denoiser(x_t, t, cond, contact) -> x0_hat`` over numpy arrays, where
``contact=None`` selects the unconditional (null-token) branch.
"""
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from . import container
from .contact import contact_discrepancy
from .geometry import InvalidInputError

CHECKPOINT_KIND = "checkpoint"
CHECKPOINT_SCHEMA = 1


# ---------------------------------------------------------------------------
# schedule

@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray        # index t-1 holds beta_t, t = 1..T

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        if b.ndim != 1 or len(b) == 0 or np.any(b <= 0) or np.any(b >= 1):
            raise InvalidInputError("betas must be a non-empty vector in (0, 1)")

    @property
    def T(self):
        return len(self.betas)

    @property
    def alphas(self):
        return 1.0 - self.betas

    @property
    def alpha_bar(self):
        """Length T+1, with alpha_bar[0] = 1."""
        return np.concatenate([[1.0], np.cumprod(self.alphas)])


def default_beta_range(T):
    """Linear 1e-4..0.02 at 1000 steps, rescaled to ``T`` steps."""
    f = 1000.0 / T
    return min(1e-4 * f, 0.5), min(0.02 * f, 0.999)


def build_schedule(T=50, beta_1=None, beta_T=None):
    if T < 1:
        raise InvalidInputError("T must be >= 1")
    lo, hi = default_beta_range(T)
    beta_1 = lo if beta_1 is None else beta_1
    beta_T = hi if beta_T is None else beta_T
    return NoiseSchedule(np.linspace(beta_1, beta_T, T))


def q_sample(x0, t, noise, schedule):
    """Forward noising; ``t`` is an int or an array broadcast over the leading axis."""
    ab = schedule.alpha_bar[np.asarray(t)]
    x0 = np.asarray(x0)
    ab = np.reshape(ab, np.shape(ab) + (1,) * (x0.ndim - np.ndim(ab)))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * np.asarray(noise)


def posterior_coefficients(schedule, t):
    """Mean coefficients (on x0, on x_t) and the variance used at step ``t``."""
    ab = schedule.alpha_bar
    beta = schedule.betas[t - 1]
    c0 = math.sqrt(ab[t - 1]) * beta / (1.0 - ab[t])
    ct = math.sqrt(1.0 - beta) * (1.0 - ab[t - 1]) / (1.0 - ab[t])
    return c0, ct, beta


# ---------------------------------------------------------------------------
# guidance

@dataclass(frozen=True)
class GuidanceConfig:
    lambda_f: float = 0.5
    contact_guidance: bool = True
    p_f: float = 0.5

    def __post_init__(self):
        if self.lambda_f < 0:
            raise InvalidInputError("lambda_f must be >= 0")
        if not 0.0 <= self.p_f <= 1.0:
            raise InvalidInputError("p_f must lie in [0, 1]")


def cfg_combine(pred_cond, pred_uncond, lambda_f):
    if lambda_f == 0:
        return pred_cond
    return (1.0 + lambda_f) * pred_cond - lambda_f * pred_uncond


def contact_guidance_step(h, c_hat, anchors, scale=None):
    """One unit-length descent step on the contact discrepancy.

    ``h`` holds keypoints ``(..., N, J, 3)`` in metres.  ``scale`` (broadcast
    to ``h``) is the size of one normalized unit in metres, i.e. the
    per-channel std.  The step has unit norm in normalized units, so
    ``lambda_c = 1 / ||grad||`` there.  Returns
    ``(h_new, value_before)``.
    """
    value, g = contact_discrepancy(c_hat, h, anchors)
    s = np.ones_like(h) if scale is None else np.broadcast_to(scale, h.shape)
    g_norm = g * s                        # gradient w.r.t. normalized coordinates
    n = float(np.linalg.norm(g_norm))
    if n < 1e-12:
        return np.array(h, copy=True), value
    return h - s * g_norm / n, value


# ---------------------------------------------------------------------------
# sampling

class SamplingError(FloatingPointError):
    pass


def sample(denoiser, schedule, shape, cond=None, contact=None, guidance=GuidanceConfig(),
           seed=0, guide_fn=None, trace=None):
    """Ancestral sampling with clean-sample prediction.

    Per step: denoise (conditional, and unconditional when ``lambda_f > 0``),
    combine, apply ``guide_fn(x0_hat, t)`` if contact guidance is enabled,
    then draw from the Gaussian posterior.  The step variance is ``beta_t``.
    """
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape)
    use_uncond = guidance.lambda_f != 0 and contact is not None
    for t in range(schedule.T, 0, -1):
        pred = denoiser(x, t, cond, contact)
        if use_uncond:
            pred = cfg_combine(pred, denoiser(x, t, cond, None), guidance.lambda_f)
        if not np.all(np.isfinite(pred)):
            bad = int(np.size(pred) - np.isfinite(pred).sum())
            raise SamplingError(f"denoiser produced {bad} non-finite values at step t={t}")
        if guidance.contact_guidance and guide_fn is not None:
            pred = guide_fn(pred, t)
        c0, ct, var = posterior_coefficients(schedule, t)
        mean = c0 * pred + ct * x
        if t > 1:
            x = mean + math.sqrt(var) * rng.standard_normal(shape)
        else:
            x = mean
        if trace is not None:
            trace.append(t)
    return x


# ---------------------------------------------------------------------------
# denoisers

class GaussianOracleDenoiser:
    """Exact posterior mean of x0 given x_t when the data is N(mu, sigma)."""

    def __init__(self, mu, sigma, schedule):
        self.mu = np.asarray(mu, dtype=np.float64)
        self.sigma = np.asarray(sigma, dtype=np.float64)
        self.schedule = schedule
        d = len(self.mu)
        self._gain = {}
        for t in range(1, schedule.T + 1):
            ab = schedule.alpha_bar[t]
            cov = ab * self.sigma + (1.0 - ab) * np.eye(d)
            self._gain[t] = math.sqrt(ab) * self.sigma @ np.linalg.inv(cov)

    def __call__(self, x, t, cond=None, contact=None):
        ab = self.schedule.alpha_bar[t]
        return self.mu + (x - math.sqrt(ab) * self.mu) @ self._gain[t].T


def timestep_embedding(t, dim):
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


def moving_average(x, window):
    """Centred moving average over the frame axis (dim 1) with edge replication."""
    if window <= 1 or x.shape[1] == 1:
        return x
    r = window // 2
    pad = torch.cat([x[:, :1].expand(-1, r, -1), x, x[:, -1:].expand(-1, r, -1)], dim=1)
    return pad.unfold(1, 2 * r + 1, 1).mean(-1)


class TinyMlpDenoiser(nn.Module):
    """Per-frame MLP over [x_t | object cond | contact or null token | context | time embedding].

    With ``context`` each frame also sees the sequence mean of ``x_t``, which
    lets independent per-frame predictions agree on one mode.
    """

    def __init__(self, x_dim, cond_dim, contact_dim, hidden=(512, 512), time_dim=64, smooth=5,
                 context=False):
        super().__init__()
        self.x_dim, self.cond_dim, self.contact_dim = x_dim, cond_dim, contact_dim
        self.time_dim, self.smooth, self.hidden = time_dim, smooth, tuple(hidden)
        self.context = bool(context)
        self.null_token = nn.Parameter(torch.zeros(max(contact_dim, 1)))
        sizes = [x_dim * (1 + self.context) + cond_dim + contact_dim + time_dim, *hidden, x_dim]
        layers = []
        for a, b in zip(sizes[:-1], sizes[1:]):
            layers += [nn.Linear(a, b), nn.SiLU()]
        self.net = nn.Sequential(*layers[:-1])
        # contact columns start at zero: a model never shown contact ignores it exactly
        with torch.no_grad():
            self.net[0].weight[:, x_dim + cond_dim:x_dim + cond_dim + contact_dim] = 0.0

    def config(self):
        return {"x_dim": self.x_dim, "cond_dim": self.cond_dim, "contact_dim": self.contact_dim,
                "hidden": list(self.hidden), "time_dim": self.time_dim, "smooth": self.smooth,
                "context": self.context}

    def forward(self, x, t, cond, contact, drop=None):
        """``drop`` (B,) bool marks examples whose contact is replaced by the null token."""
        b, n, _ = x.shape
        parts = [x]
        if self.cond_dim:
            parts.append(cond)
        if self.contact_dim:
            null = self.null_token.expand(b, n, self.contact_dim)
            if contact is None:
                c = null
            elif drop is not None:
                c = torch.where(drop[:, None, None], null, contact)
            else:
                c = contact
            parts.append(c)
        if self.context:
            parts.append(x.mean(dim=1, keepdim=True).expand(b, n, self.x_dim))
        emb = timestep_embedding(t, self.time_dim)[:, None].expand(b, n, self.time_dim)
        parts.append(emb)
        out = self.net(torch.cat(parts, dim=-1))
        return moving_average(out, self.smooth)


@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, data, floor=1e-6):
        flat = np.asarray(data, dtype=np.float64).reshape(-1, np.shape(data)[-1])
        return cls(flat.mean(0), np.maximum(flat.std(0), floor))

    @classmethod
    def identity(cls, dim):
        return cls(np.zeros(dim), np.ones(dim))

    def encode(self, x):
        return (np.asarray(x) - self.mean) / self.std

    def decode(self, z):
        return np.asarray(z) * self.std + self.mean


@dataclass
class TrainedDenoiser:
    """A network with its data normalizers and schedule; callable in normalized space."""
    model: TinyMlpDenoiser
    x_norm: Normalizer
    cond_norm: Normalizer
    contact_norm: Normalizer
    schedule: NoiseSchedule
    meta: dict = field(default_factory=dict)

    def _tensor(self, a, norm):
        if a is None:
            return None
        return torch.as_tensor(norm.encode(a), dtype=torch.float32)

    def __call__(self, x, t, cond, contact):
        """``x`` normalized; ``cond`` and ``contact`` in raw units (or ``None``)."""
        b = x.shape[0]
        with torch.no_grad():
            out = self.model(torch.as_tensor(x, dtype=torch.float32),
                             torch.full((b,), t, dtype=torch.long),
                             self._tensor(cond, self.cond_norm),
                             self._tensor(contact, self.contact_norm))
        return out.double().numpy()


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.0
    ema_decay: float = 0.995
    p_f: float = 0.5
    warmup: int = 50
    seed: int = 0
    T: int = 50


@dataclass
class TrainResult:
    denoiser: TrainedDenoiser
    raw_model: TinyMlpDenoiser
    losses: list


def cosine_lr(step, total, base, warmup):
    if step < warmup:
        return base * (step + 1) / warmup
    p = (step - warmup) / max(total - warmup, 1)
    return base * 0.5 * (1.0 + math.cos(math.pi * min(p, 1.0)))


def train_denoiser(x0, cond=None, contact=None, cfg=TrainConfig(), hidden=(512, 512),
                   smooth=5, schedule=None, log=None, context=False):
    """Train a :class:`TinyMlpDenoiser` on ``x0`` (S, N, D) with optional conditions.

    Each example's contact input is replaced by the null token with
    probability ``cfg.p_f``.  Returns the EMA model wrapped with its
    normalizers, plus the raw model and the loss history.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim != 3 or len(x0) == 0:
        raise InvalidInputError("training data must be a non-empty (S, N, D) array")
    s = len(x0)
    schedule = schedule or build_schedule(cfg.T)
    x_norm = Normalizer.fit(x0)
    cond_norm = Normalizer.fit(cond) if cond is not None else Normalizer.identity(0)
    contact_norm = Normalizer.fit(contact) if contact is not None else Normalizer.identity(0)
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    model = TinyMlpDenoiser(x0.shape[-1], 0 if cond is None else cond.shape[-1],
                            0 if contact is None else contact.shape[-1], hidden, smooth=smooth,
                            context=context)
    ema = TinyMlpDenoiser(**{k: v for k, v in model.config().items()})
    ema.load_state_dict(model.state_dict())
    for p in ema.parameters():
        p.requires_grad_(False)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    xs = torch.as_tensor(x_norm.encode(x0), dtype=torch.float32)
    cs = None if cond is None else torch.as_tensor(cond_norm.encode(cond), dtype=torch.float32)
    ks = None if contact is None else torch.as_tensor(contact_norm.encode(contact),
                                                      dtype=torch.float32)
    ab = torch.as_tensor(schedule.alpha_bar, dtype=torch.float32)
    losses = []
    for step in range(cfg.steps):
        for g in opt.param_groups:
            g["lr"] = cosine_lr(step, cfg.steps, cfg.lr, cfg.warmup)
        idx = torch.as_tensor(rng.integers(0, s, size=min(cfg.batch_size, s)))
        t = torch.as_tensor(rng.integers(1, schedule.T + 1, size=len(idx)))
        noise = torch.as_tensor(rng.standard_normal(xs[idx].shape), dtype=torch.float32)
        a = ab[t][:, None, None]
        xt = a.sqrt() * xs[idx] + (1 - a).sqrt() * noise
        drop = torch.as_tensor(rng.random(len(idx)) < cfg.p_f)
        pred = model(xt, t, None if cs is None else cs[idx], None if ks is None else ks[idx], drop)
        loss = ((pred - xs[idx]) ** 2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        with torch.no_grad():
            for pe, pm in zip(ema.parameters(), model.parameters()):
                pe.mul_(cfg.ema_decay).add_(pm, alpha=1.0 - cfg.ema_decay)
        losses.append(float(loss.detach()))
        if log is not None and (step % 200 == 0 or step == cfg.steps - 1):
            log(step, losses[-1])
    ema.eval()
    model.eval()
    meta = {"train": {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}}
    wrapped = TrainedDenoiser(ema, x_norm, cond_norm, contact_norm, schedule, meta)
    return TrainResult(wrapped, model, losses)


def denoising_mse(den, x0, cond=None, contact=None, seed=0, model=None):
    """Held-out clean-sample MSE in normalized units averaged over random timesteps."""
    rng = np.random.default_rng(seed)
    sched = den.schedule
    xn = den.x_norm.encode(x0)
    t = rng.integers(1, sched.T + 1, size=len(xn))
    noise = rng.standard_normal(xn.shape)
    xt = q_sample(xn, t, noise, sched)
    net = model or den.model
    with torch.no_grad():
        pred = net(torch.as_tensor(xt, dtype=torch.float32), torch.as_tensor(t),
                   den._tensor(cond, den.cond_norm), den._tensor(contact, den.contact_norm))
    return float(((pred.double().numpy() - xn) ** 2).mean())


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, den, meta=None):
    arrays = {f"param/{k}": v.detach().cpu().numpy().astype("<f4")
              for k, v in den.model.state_dict().items()}
    for name, norm in (("x", den.x_norm), ("cond", den.cond_norm), ("contact", den.contact_norm)):
        arrays[f"norm/{name}/mean"] = np.asarray(norm.mean, dtype="<f8")
        arrays[f"norm/{name}/std"] = np.asarray(norm.std, dtype="<f8")
    arrays["betas"] = np.asarray(den.schedule.betas, dtype="<f8")
    m = dict(den.meta)
    m.update(meta or {})
    m["model"] = den.model.config()
    container.save(path, CHECKPOINT_KIND, arrays, m, CHECKPOINT_SCHEMA)


def load_checkpoint(path):
    meta, arr = container.load(path, kind=CHECKPOINT_KIND, schema_version=CHECKPOINT_SCHEMA)
    cfg = meta["model"]
    model = TinyMlpDenoiser(cfg["x_dim"], cfg["cond_dim"], cfg["contact_dim"], tuple(cfg["hidden"]),
                            cfg["time_dim"], cfg["smooth"], cfg.get("context", False))
    state = {k[len("param/"):]: torch.as_tensor(v) for k, v in arr.items() if k.startswith("param/")}
    model.load_state_dict(state)
    model.eval()
    norms = [Normalizer(arr[f"norm/{n}/mean"], arr[f"norm/{n}/std"])
             for n in ("x", "cond", "contact")]
    meta = {k: v for k, v in meta.items() if not k.startswith("_") and k != "model"}
    return TrainedDenoiser(model, *norms, NoiseSchedule(arr["betas"]), meta)
