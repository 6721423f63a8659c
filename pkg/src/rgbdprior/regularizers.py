"""Photometric loss and the hand-crafted geometric regularizers.

Per-ray terms are averaged over the ray batch (``reduction="mean"``) so the
weighting coefficients do not depend on how many rays are rendered per step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .cameras import CameraPose
from .volume_rendering import RaySampleBatch


def _reduce(per_ray: torch.Tensor, reduction: str) -> torch.Tensor:
    if reduction == "mean":
        return per_ray.mean()
    if reduction == "sum":
        return per_ray.sum()
    if reduction == "none":
        return per_ray
    raise ValueError(f"unknown reduction {reduction!r}")


def photometric_loss(rendered: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared error over pixels and channels."""
    if rendered.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(rendered.shape)} vs {tuple(target.shape)}")
    return ((rendered - target) ** 2).mean()


def distortion_loss(samples: RaySampleBatch, depth: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    """Depth-normalized interval distortion.

    ``(1/D) * (sum_ij w_i w_j |m_i - m_j| + 1/3 sum_i w_i^2 (t_{i+1} - t_i))``
    with interval midpoints ``m_i``, evaluated as the exact O(N^2) double sum.
    """
    depth = torch.as_tensor(depth, dtype=samples.t.dtype)
    if torch.any(depth <= 0):
        raise ValueError("distortion_loss requires positive expected depth")
    w = samples.weights
    edges = samples.edges
    mid = 0.5 * (edges[..., 1:] + edges[..., :-1])
    width = edges[..., 1:] - edges[..., :-1]
    pair = (w[..., :, None] * w[..., None, :] * (mid[..., :, None] - mid[..., None, :]).abs()).sum((-2, -1))
    self_term = (w ** 2 * width).sum(-1) / 3.0
    return _reduce((pair + self_term) / depth, reduction)


def foreground_loss(samples: RaySampleBatch, reduction: str = "mean") -> torch.Tensor:
    return _reduce((1.0 - samples.weights.sum(-1)) ** 2, reduction)


@dataclass
class FrustumSet:
    """Viewing frusta of the training cameras, bounded by depth planes along the optical axis."""

    cameras: list[CameraPose]
    near: float
    far: float

    def __post_init__(self):
        if not self.near < self.far:
            raise ValueError("frustum near plane must be in front of the far plane")
        ids = [id(c) for c in self.cameras]
        if len(set(ids)) != len(ids):
            raise ValueError("each training camera must appear exactly once")
        # stacked extrinsics for vectorized projection
        self._R = np.stack([c.rotation for c in self.cameras]) if self.cameras else np.zeros((0, 3, 3))
        self._c = np.stack([c.center for c in self.cameras]) if self.cameras else np.zeros((0, 3))
        self._K = np.array([[c.fx, c.fy, c.cx, c.cy, c.width, c.height] for c in self.cameras]).reshape(-1, 6)

    def contains(self, points) -> np.ndarray:
        """Boolean ``(..., n_cameras)`` membership; points on a face count as inside."""
        p = np.asarray(points, dtype=np.float64)
        rel = p[..., None, :] - self._c
        p_cam = np.einsum("...kj,kji->...ki", rel, self._R)
        z = -p_cam[..., 2]
        fx, fy, cx, cy, w, h = self._K.T
        with np.errstate(divide="ignore", invalid="ignore"):
            u = fx * p_cam[..., 0] / z + cx
            v = -fy * p_cam[..., 1] / z + cy
        return (z >= self.near) & (z <= self.far) & (u >= 0) & (u <= w) & (v >= 0) & (v <= h)

    def count(self, points) -> np.ndarray:
        return self.contains(points).sum(-1)


def count_containing_frustums(x, frustums: FrustumSet):
    return frustums.count(x)


def frustum_loss(samples: RaySampleBatch, frustums: FrustumSet, points=None, reduction: str = "mean") -> torch.Tensor:
    """Weight mass placed where fewer than two training frusta see the sample.

    The visibility mask is a constant; gradients reach the weights only.
    """
    if points is None:
        points = samples.points
    counts = frustums.count(points.detach().cpu().numpy())
    mask = torch.as_tensor(counts <= 1, dtype=samples.weights.dtype)
    return _reduce((samples.weights * mask).sum(-1), reduction)


def geometric_loss(photo, fg=0.0, fr=0.0, dist=0.0, lambda_fg: float = 0.0, lambda_fr: float = 0.0,
                   lambda_dist: float = 0.0):
    if min(lambda_fg, lambda_fr, lambda_dist) < 0:
        raise ValueError("regularizer weights must be non-negative")
    return lambda_fg * fg + lambda_fr * fr + lambda_dist * dist + photo
