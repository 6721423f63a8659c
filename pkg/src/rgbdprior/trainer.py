"""Radiance-field optimization with geometric regularizers and an injected diffusion-prior gradient.

Each step renders a random batch of training rays for the photometric and
geometric terms. When the prior is active it also renders one RGBD patch,
either from a virtual camera or (with ``input_patch_probability``) over a
training image whose true colors replace the rendered ones. The prior's
normalized noise estimate ``g`` enters through the surrogate
``sum(weight * g * patch)``, whose gradient with respect to the patch is
exactly ``weight * g``. Descending on it moves the rendered patch against
the predicted noise, i.e. towards higher prior density.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
import torch

from .cameras import CameraPose, interpolate_pose, jitter_rotation
from .data.scene import SceneDataset
from .ddm.diffusion import score_gradient
from .ddm.patch import encode_rgbd
from .fields import EncodingConfig, RadianceField
from .regularizers import FrustumSet, distortion_loss, foreground_loss, frustum_loss, photometric_loss
from .volume_rendering import render_patch, render_rays

log = logging.getLogger(__name__)

REFERENCE_TOTAL_STEPS = 12_000
PRESETS = {
    "llff": {"lambda_dist_max": 1.5e-5, "ddm_depth_weight": 4e-7, "ddm_rgb_weight": 3e-6,
             "lambda_fg": 1e-3, "lambda_fr": 1e-3},
    "dtu": {"lambda_dist_max": 1e-4, "ddm_depth_weight": 4e-6, "ddm_rgb_weight": 3e-5,
            "lambda_fg": 1e-3, "lambda_fr": 0.0},
}
TERMS = ("photo", "fg", "fr", "dist", "ddm")


class NumericalFailure(RuntimeError):
    """Training produced non-finite gradients too many times in a row."""


@dataclass
class TrainConfig:
    """Fitting hyper-parameters; ``None`` entries are filled from ``preset`` by :meth:`resolved`."""

    preset: str | None = "llff"
    total_steps: int = REFERENCE_TOTAL_STEPS
    tau_start: float = 0.1
    tau_warmup_steps: int = 2500
    dist_ramp_start: int = 3000
    dist_ramp_end: int = 8000
    lambda_dist_max: float | None = None
    lambda_fg: float | None = None
    lambda_fr: float | None = None
    ddm_depth_weight: float | None = None
    ddm_rgb_weight: float | None = None
    patch_size: int = 48
    rays_per_batch: int = 4096
    samples_per_ray: int = 128
    input_patch_probability: float = 0.25
    lr_grid: float = 1e-2
    lr_net: float = 1e-3
    camera_jitter_deg: float = 5.0
    seed: int = 0
    diag_every: int = 500
    diag_rays: int = 1024
    max_nan_aborts: int = 10
    encoding: EncodingConfig = field(default_factory=EncodingConfig)

    def resolved(self) -> "TrainConfig":
        values = {}
        if self.preset is not None:
            if self.preset not in PRESETS:
                raise ValueError(f"unknown preset {self.preset!r}; expected one of {sorted(PRESETS)}")
            values = PRESETS[self.preset]
        out = {}
        for key in ("lambda_dist_max", "lambda_fg", "lambda_fr", "ddm_depth_weight", "ddm_rgb_weight"):
            val = getattr(self, key)
            out[key] = float(values.get(key, 0.0) if val is None else val)
        cfg = replace(self, **out)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if not 0.0 <= self.tau_start <= 1.0:
            raise ValueError("tau_start must lie in [0, 1]")
        if not self.dist_ramp_start < self.dist_ramp_end <= self.total_steps:
            raise ValueError("distortion ramp needs start < end <= total_steps")
        if self.tau_warmup_steps <= 0:
            raise ValueError("tau_warmup_steps must be positive")
        for f in ("lambda_dist_max", "lambda_fg", "lambda_fr", "ddm_depth_weight", "ddm_rgb_weight"):
            v = getattr(self, f)
            if v is not None and v < 0:
                raise ValueError(f"{f} must be non-negative")
        if not 0.0 <= self.input_patch_probability <= 1.0:
            raise ValueError("input_patch_probability must lie in [0, 1]")

    @property
    def uses_ddm(self) -> bool:
        return (self.ddm_depth_weight or 0.0) > 0 or (self.ddm_rgb_weight or 0.0) > 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("encoding"), dict):
            d["encoding"] = EncodingConfig(**d["encoding"])
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def rescaled(config: TrainConfig, total_steps: int) -> TrainConfig:
    """Shrink every schedule breakpoint proportionally to a shorter run."""
    f = total_steps / config.total_steps
    start = max(int(round(config.dist_ramp_start * f)), 0)
    end = min(max(int(round(config.dist_ramp_end * f)), start + 1), total_steps)
    return replace(config, total_steps=total_steps, tau_warmup_steps=max(int(round(config.tau_warmup_steps * f)), 1),
                   dist_ramp_start=start, dist_ramp_end=end)


def geometric_baseline_config(config: TrainConfig) -> TrainConfig:
    """Same schedule with the prior switched off."""
    return replace(config, ddm_depth_weight=0.0, ddm_rgb_weight=0.0)


def photometric_only_config(config: TrainConfig) -> TrainConfig:
    return replace(config, lambda_dist_max=0.0, lambda_fg=0.0, lambda_fr=0.0, ddm_depth_weight=0.0,
                   ddm_rgb_weight=0.0)


def tau_schedule(step: int, tau_start: float = 0.1, warmup_steps: int = 2500) -> float:
    """Diffusion time fed to the prior: linear from ``tau_start`` to 0 over the warm-up, then 0."""
    if step >= warmup_steps:
        return 0.0
    return tau_start * (1.0 - step / warmup_steps)


def lambda_dist_schedule(step: int, preset="llff", start: int = 3000, end: int = 8000) -> float:
    """Distortion weight: 0 before ``start``, linear ramp to the maximum at ``end``, constant after.

    ``preset`` is a preset name or an explicit maximum value.
    """
    if isinstance(preset, str):
        if preset not in PRESETS:
            raise ValueError(f"unknown preset {preset!r}")
        peak = PRESETS[preset]["lambda_dist_max"]
    else:
        peak = float(preset)
    if step <= start:
        return 0.0
    if step >= end:
        return peak
    return peak * (step - start) / (end - start)


class VirtualCameraSampler:
    """Random poses blended between two training cameras plus a small rotation jitter."""

    def __init__(self, cameras: list[CameraPose], max_jitter_deg: float = 5.0):
        if not cameras:
            raise ValueError("need at least one camera")
        self.cameras = cameras
        self.max_jitter_deg = max_jitter_deg

    def sample(self, rng: np.random.Generator) -> CameraPose:
        n = len(self.cameras)
        i, j = rng.choice(n, 2, replace=n < 2)
        c2w = interpolate_pose(self.cameras[i].c2w, self.cameras[j].c2w, float(rng.random()))
        c2w = jitter_rotation(c2w, self.max_jitter_deg, rng)
        ref = self.cameras[i]
        return CameraPose(ref.fx, ref.fy, ref.cx, ref.cy, ref.width, ref.height, c2w)

    @staticmethod
    def window(camera: CameraPose, size: int, rng: np.random.Generator) -> tuple[int, int]:
        top = int(rng.integers(0, max(camera.height - size, 0) + 1))
        left = int(rng.integers(0, max(camera.width - size, 0) + 1))
        return top, left


@dataclass
class TrainState:
    field: RadianceField
    optimizer: torch.optim.Optimizer
    scheduler: torch.optim.lr_scheduler.LRScheduler
    config: TrainConfig
    scene: SceneDataset
    frustums: FrustumSet
    origins: torch.Tensor
    directions: torch.Tensor
    targets: torch.Tensor
    generator: torch.Generator
    rng: np.random.Generator
    cameras: VirtualCameraSampler
    ddm: object = None
    schedule: object = None
    step: int = 0
    nan_aborts: int = 0


def make_optimizer(field_model: RadianceField, config: TrainConfig):
    opt = torch.optim.Adam([
        {"params": field_model.grid_parameters(), "lr": config.lr_grid},
        {"params": field_model.network_parameters(), "lr": config.lr_net},
    ], betas=(0.9, 0.99), eps=1e-15)
    total = max(config.total_steps, 1)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: 0.5 * (1.0 + math.cos(math.pi * min(s, total) / total)))
    return opt, sched


def init_state(scene: SceneDataset, config: TrainConfig, ddm=None, field_model: RadianceField | None = None,
               dtype=torch.float32) -> TrainState:
    """``ddm`` is ``(model, schedule)`` or ``None``."""
    config = config.resolved()
    if config.uses_ddm and ddm is None:
        raise ValueError("the diffusion prior weights are non-zero but no prior checkpoint was given")
    if not scene.train_ids:
        raise ValueError("scene has no training views")
    torch.manual_seed(config.seed)
    if field_model is None:
        field_model = RadianceField(scene.bounds, config.encoding, dtype=dtype)
    dtype = field_model.lo.dtype
    opt, sched = make_optimizer(field_model, config)
    origins, dirs, targets = [], [], []
    for i in scene.train_ids:
        cam = scene.cameras[i]
        rows, cols = np.meshgrid(np.arange(cam.height), np.arange(cam.width), indexing="ij")
        o, d = cam.pixel_rays(rows.ravel(), cols.ravel(), dtype=dtype)
        origins.append(o)
        dirs.append(d)
        targets.append(torch.as_tensor(scene.images[i].reshape(-1, 3), dtype=dtype))
    model, schedule = ddm if ddm is not None else (None, None)
    return TrainState(field_model, opt, sched, config, scene, FrustumSet(scene.train_cameras, scene.near, scene.far),
                      torch.cat(origins), torch.cat(dirs), torch.cat(targets),
                      torch.Generator().manual_seed(config.seed), np.random.default_rng(config.seed),
                      VirtualCameraSampler(scene.train_cameras, config.camera_jitter_deg), model, schedule)


def _prior_patch(state: TrainState, tau: float):
    """Render one patch and build the prior surrogate; returns ``(surrogate, samples, kind)``."""
    cfg, scene = state.config, state.scene
    size = cfg.patch_size
    use_input = state.rng.random() < cfg.input_patch_probability
    if use_input:
        view = state.scene.train_ids[int(state.rng.integers(len(scene.train_ids)))]
        cam = scene.cameras[view]
    else:
        cam = state.cameras.sample(state.rng)
    top, left = VirtualCameraSampler.window(cam, size, state.rng)
    patch, res = render_patch(state.field, cam, top, left, size, cfg.samples_per_ray, scene.near, scene.far,
                              scene.scale, jitter=True, generator=state.generator)
    weights = torch.tensor([cfg.ddm_rgb_weight] * 3 + [cfg.ddm_depth_weight], dtype=patch.dtype)
    if use_input:
        crop = torch.as_tensor(scene.images[view][top:top + size, left:left + size], dtype=patch.dtype)
        fed = torch.cat([encode_rgbd(crop, torch.zeros(crop.shape[:2], dtype=patch.dtype), scene.scale)[..., :3],
                         patch[..., 3:]], -1)
        weights[:3] = 0.0
    else:
        fed = patch
    g = score_gradient(state.ddm, fed.detach().float(), tau, state.schedule).to(patch.dtype)
    return (weights * g * fed).sum(), res.samples, "input" if use_input else "rendered"


def compute_terms(state: TrainState):
    """Weighted loss terms of one step sharing a single autograd graph.

    Returns ``(terms, raw, info)``: weighted terms that contribute to the update,
    the unweighted per-term values and step bookkeeping.
    """
    cfg = state.config
    step = state.step
    tau = tau_schedule(step, cfg.tau_start, cfg.tau_warmup_steps)
    lam_dist = lambda_dist_schedule(step, cfg.lambda_dist_max, cfg.dist_ramp_start, cfg.dist_ramp_end)
    idx = torch.randint(0, state.origins.shape[0], (cfg.rays_per_batch,), generator=state.generator)
    res = render_rays(state.field, state.origins[idx], state.directions[idx], state.scene.near, state.scene.far,
                      cfg.samples_per_ray, jitter=True, generator=state.generator)
    s = res.samples
    raw = {"photo": photometric_loss(res.color, state.targets[idx]),
           "fg": foreground_loss(s),
           "fr": frustum_loss(s, state.frustums),
           "dist": distortion_loss(s, res.depth.detach())}
    lambdas = {"photo": 1.0, "fg": cfg.lambda_fg, "fr": cfg.lambda_fr, "dist": lam_dist}
    terms = {k: lambdas[k] * raw[k] for k in ("photo", "fg", "fr", "dist") if lambdas[k] > 0}
    sample_sets = {k: s for k in terms}
    info = {"tau": tau, "lambda_dist": lam_dist, "patch": None, "mean_batch_depth": float(res.depth.detach().mean())}
    if cfg.uses_ddm:
        surrogate, patch_samples, kind = _prior_patch(state, tau)
        terms["ddm"] = surrogate
        raw["ddm"] = surrogate.detach()
        sample_sets["ddm"] = patch_samples
        info["patch"] = kind
    info["sample_sets"] = sample_sets
    return terms, raw, info


def _term_grad_norm(term: torch.Tensor, samples) -> float:
    inputs = [t for t in (samples.sigma, samples.color) if t.requires_grad]
    if not inputs or not term.requires_grad:
        return 0.0
    grads = torch.autograd.grad(term, inputs, retain_graph=True, allow_unused=True)
    return float(math.sqrt(sum(float((g ** 2).sum()) for g in grads if g is not None)))


def training_step(state: TrainState) -> dict:
    """One optimizer update; returns a JSON-ready diagnostics record.

    ``grad_norms`` are per-term gradient norms with respect to the sampled
    densities and colors. Non-finite parameter gradients abort the update and
    leave the state untouched except for the random streams.
    """
    terms, raw, info = compute_terms(state)
    sample_sets = info.pop("sample_sets")
    grad_norms = {k: (_term_grad_norm(terms[k], sample_sets[k]) if k in terms else 0.0) for k in TERMS}
    total = sum(terms.values())
    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    params = [p for g in state.optimizer.param_groups for p in g["params"]]
    finite = all(p.grad is None or bool(torch.isfinite(p.grad).all()) for p in params)
    record = {"step": state.step,
              "losses": {k: float(raw[k].detach()) if k in raw else 0.0 for k in TERMS},
              "grad_norms": grad_norms, "tau": info["tau"], "lambda_dist": info["lambda_dist"],
              "patch": info["patch"], "nan_abort": not finite}
    if not finite:
        state.optimizer.zero_grad(set_to_none=True)
        state.nan_aborts += 1
        log.warning("non-finite gradient at step %d; update skipped", state.step)
        return record
    state.nan_aborts = 0
    state.optimizer.step()
    state.scheduler.step()
    state.step += 1
    return record


@torch.no_grad()
def mean_training_depth(state_or_field, scene: SceneDataset, n_rays: int = 1024, samples_per_ray: int = 128,
                        seed: int = 1234) -> float:
    """Mean expected depth over a fixed random subset of training-view rays (eye-patch diagnostic)."""
    field_model = state_or_field.field if isinstance(state_or_field, TrainState) else state_or_field
    dtype = field_model.lo.dtype
    rng = np.random.default_rng(seed)
    depths = []
    per_view = max(1, n_rays // len(scene.train_ids))
    for i in scene.train_ids:
        cam = scene.cameras[i]
        rows = rng.integers(0, cam.height, per_view)
        cols = rng.integers(0, cam.width, per_view)
        o, d = cam.pixel_rays(rows, cols, dtype=dtype)
        depths.append(render_rays(field_model, o, d, scene.near, scene.far, samples_per_ray).depth)
    return float(torch.cat(depths).mean())


@dataclass
class FitResult:
    field: RadianceField
    log: list[dict]
    config: TrainConfig

    def log_lines(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.log)


def fit(scene: SceneDataset, config: TrainConfig, ddm=None, log_file=None, field_model=None,
        callback=None, dtype=torch.float32) -> FitResult:
    """Run ``config.total_steps`` updates; ``log_file`` (open text handle) receives JSON lines."""
    state = init_state(scene, config, ddm, field_model, dtype)
    cfg = state.config
    records = []
    while state.step < cfg.total_steps:
        rec = training_step(state)
        if rec["nan_abort"] and state.nan_aborts >= cfg.max_nan_aborts:
            raise NumericalFailure(f"{state.nan_aborts} consecutive non-finite updates at step {state.step}")
        if not rec["nan_abort"] and cfg.diag_every and (state.step % cfg.diag_every == 0
                                                         or state.step == cfg.total_steps):
            rec["mean_train_depth"] = mean_training_depth(state, scene, cfg.diag_rays, cfg.samples_per_ray)
        records.append(rec)
        if log_file is not None:
            log_file.write(json.dumps(rec, sort_keys=True) + "\n")
        if callback is not None:
            callback(state, rec)
    return FitResult(state.field, records, cfg)
