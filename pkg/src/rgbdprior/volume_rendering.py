"""Discrete alpha compositing of field samples along camera rays."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .cameras import CameraPose
from .ddm.patch import encode_rgbd

DEPTH_GUARD = 1e-6
WHITE = (1.0, 1.0, 1.0)


@dataclass
class Ray:
    origin: torch.Tensor
    direction: torch.Tensor
    t_near: float
    t_far: float

    def __post_init__(self):
        self.origin = torch.as_tensor(self.origin)
        self.direction = torch.as_tensor(self.direction, dtype=self.origin.dtype)
        if abs(float(self.direction.norm()) - 1.0) > 1e-6:
            raise ValueError("ray direction must be unit length")
        if not 0 < self.t_near < self.t_far:
            raise ValueError("ray bounds must satisfy 0 < t_near < t_far")


@dataclass
class RaySampleBatch:
    """Per-sample quantities of a batch of rays; leading dims index rays, the last indexes samples."""

    t: torch.Tensor
    t_far: torch.Tensor
    sigma: torch.Tensor
    color: torch.Tensor
    alpha: torch.Tensor | None = None
    transmittance: torch.Tensor | None = None
    weights: torch.Tensor | None = None
    points: torch.Tensor | None = None

    @property
    def deltas(self) -> torch.Tensor:
        # the last interval closes at t_far
        return torch.cat([self.t[..., 1:] - self.t[..., :-1], self.t_far[..., None] - self.t[..., -1:]], -1)

    @property
    def edges(self) -> torch.Tensor:
        """Interval end points ``t_0 .. t_N, t_far``."""
        return torch.cat([self.t, self.t_far[..., None]], -1)


@dataclass
class RenderResult:
    color: torch.Tensor
    depth: torch.Tensor
    weight_sum: torch.Tensor
    samples: RaySampleBatch


def stratified_samples(near, far, n_samples: int, jitter: bool = False, generator: torch.Generator | None = None,
                       dtype=torch.float32) -> torch.Tensor:
    """One sample per equal-width bin of ``[near, far]``; bin centers unless jittered."""
    if n_samples < 2:
        raise ValueError("n_samples must be at least 2")
    near = torch.as_tensor(near, dtype=dtype)
    far = torch.as_tensor(far, dtype=dtype)
    near, far = torch.broadcast_tensors(near, far)
    shape = near.shape + (n_samples,)
    if jitter:
        u = torch.rand(shape, generator=generator, dtype=dtype)
    else:
        u = torch.full(shape, 0.5, dtype=dtype)
    bins = torch.arange(n_samples, dtype=dtype)
    return near[..., None] + (bins + u) / n_samples * (far - near)[..., None]


def sample_ray(ray: Ray, n_samples: int, jitter: bool = False, seed: int | None = None) -> torch.Tensor:
    generator = None
    if jitter:
        generator = torch.Generator().manual_seed(0 if seed is None else seed)
    return stratified_samples(ray.t_near, ray.t_far, n_samples, jitter, generator, dtype=ray.origin.dtype)


def composite(samples: RaySampleBatch, background=WHITE) -> RenderResult:
    """Alpha-composite samples; fills ``alpha``, ``transmittance`` and ``weights`` on ``samples``.

    Expected depth falls back to ``t_far`` when the ray accumulates less than
    ``DEPTH_GUARD`` total weight.
    """
    sigma, color = samples.sigma, samples.color
    alpha = -torch.expm1(-sigma * samples.deltas)
    survive = torch.cat([torch.ones_like(alpha[..., :1]), 1.0 - alpha[..., :-1]], -1)
    trans = torch.cumprod(survive, -1)
    weights = trans * alpha
    wsum = weights.sum(-1)
    bg = torch.as_tensor(background, dtype=color.dtype)
    rgb = (weights[..., None] * color).sum(-2) + (1.0 - wsum)[..., None] * bg
    depth = torch.where(wsum > DEPTH_GUARD,
                        (weights * samples.t).sum(-1) / wsum.clamp_min(DEPTH_GUARD),
                        samples.t_far.expand_as(wsum))
    samples.alpha, samples.transmittance, samples.weights = alpha, trans, weights
    return RenderResult(rgb, depth, wsum, samples)


def render_rays(field, origins: torch.Tensor, directions: torch.Tensor, near, far, n_samples: int,
                jitter: bool = False, generator: torch.Generator | None = None, background=None) -> RenderResult:
    dtype = origins.dtype
    near = torch.as_tensor(near, dtype=dtype).expand(origins.shape[:-1])
    far = torch.as_tensor(far, dtype=dtype).expand(origins.shape[:-1])
    t = stratified_samples(near, far, n_samples, jitter, generator, dtype=dtype)
    points = origins[..., None, :] + t[..., None] * directions[..., None, :]
    sigma, rgb = field(points, directions[..., None, :])
    samples = RaySampleBatch(t=t, t_far=far, sigma=sigma, color=rgb, points=points)
    if background is None:
        background = field.background
    return composite(samples, background)


def render_patch(field, camera: CameraPose, top: int, left: int, size: int, n_samples: int, near: float,
                 far: float, scale: float, jitter: bool = False, generator: torch.Generator | None = None):
    """Render a ``size x size`` pixel window as an encoded RGBD patch.

    Returns ``(patch, result)`` where ``patch`` has shape ``(size, size, 4)`` and
    keeps its autograd path to the field parameters; ``result`` is flat over
    the window's pixels in row-major order.
    """
    camera.validate()
    dtype = field.lo.dtype
    origins, dirs = camera.window_rays(top, left, size, dtype=dtype)
    result = render_rays(field, origins.reshape(-1, 3), dirs.reshape(-1, 3), near, far, n_samples,
                         jitter=jitter, generator=generator)
    patch = encode_rgbd(result.color, result.depth, scale).reshape(size, size, 4)
    return patch, result


@torch.no_grad()
def render_image(field, camera: CameraPose, near: float, far: float, n_samples: int, chunk: int = 4096):
    """Full-frame render without gradients; returns numpy ``(rgb, depth)``."""
    rows, cols = np.meshgrid(np.arange(camera.height), np.arange(camera.width), indexing="ij")
    origins, dirs = camera.pixel_rays(rows.ravel(), cols.ravel(), dtype=field.lo.dtype)
    rgb, depth = [], []
    for i in range(0, origins.shape[0], chunk):
        res = render_rays(field, origins[i:i + chunk], dirs[i:i + chunk], near, far, n_samples)
        rgb.append(res.color)
        depth.append(res.depth)
    h, w = camera.height, camera.width
    return (torch.cat(rgb).reshape(h, w, 3).cpu().numpy().astype(np.float64),
            torch.cat(depth).reshape(h, w).cpu().numpy().astype(np.float64))


def write_render_pngs(rgb: np.ndarray, depth: np.ndarray, near: float, color_path, depth_path) -> None:
    """8-bit color PNG and 16-bit inverse-depth PNG (``near / D`` mapped to [0, 65535])."""
    from PIL import Image

    Image.fromarray(np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)).save(color_path)
    with np.errstate(divide="ignore"):
        inv = np.clip(near / np.maximum(depth, 1e-12), 0.0, 1.0)
    Image.fromarray(np.round(inv * 65535.0).astype(np.uint16)).save(depth_path)
