"""Pinhole cameras and ray generation.

Convention: camera looks down -z with +y up (OpenGL style). Pixel ``(row, col)``
has its center at image coordinates ``(col + 0.5, row + 0.5)``. Ray
directions are unit length, so the ray parameter ``t`` is metric distance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy.spatial.transform import Rotation, Slerp

ROTATION_TOL = 1e-4


def validate_rotation(R: np.ndarray, tol: float = ROTATION_TOL) -> None:
    """Raise ``ValueError`` unless ``R`` is orthonormal with determinant +1."""
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        raise ValueError("rotation must be a finite 3x3 matrix")
    err = np.abs(R.T @ R - np.eye(3)).max()
    if err > tol:
        raise ValueError(f"rotation is not orthonormal (max deviation {err:.2e})")
    det = np.linalg.det(R)
    if det < 0:
        raise ValueError(f"rotation has determinant {det:.4f}; a proper rotation is required")


@dataclass
class CameraPose:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    c2w: np.ndarray

    def __post_init__(self):
        self.c2w = np.asarray(self.c2w, dtype=np.float64).reshape(4, 4)

    @property
    def rotation(self) -> np.ndarray:
        return self.c2w[:3, :3]

    @property
    def center(self) -> np.ndarray:
        return self.c2w[:3, 3]

    def validate(self) -> None:
        for name in ("fx", "fy", "cx", "cy"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"camera intrinsic {name} is not finite")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("degenerate camera: focal lengths must be positive (intrinsics not invertible)")
        if self.width < 1 or self.height < 1:
            raise ValueError("camera image extent must be at least 1x1")
        validate_rotation(self.rotation)

    def pixel_rays(self, rows, cols, dtype=torch.float32):
        """World-space ray origins and unit directions for pixel indices.

        ``rows``/``cols`` are integer arrays of equal shape; the result has that
        shape plus a trailing 3.
        """
        self.validate()
        rows = np.asarray(rows, dtype=np.float64)
        cols = np.asarray(cols, dtype=np.float64)
        x = (cols + 0.5 - self.cx) / self.fx
        y = -(rows + 0.5 - self.cy) / self.fy
        d_cam = np.stack([x, y, -np.ones_like(x)], axis=-1)
        d_world = d_cam @ self.rotation.T
        d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
        origins = np.broadcast_to(self.center, d_world.shape)
        return (torch.as_tensor(np.ascontiguousarray(origins), dtype=dtype),
                torch.as_tensor(d_world, dtype=dtype))

    def window_rays(self, top: int, left: int, size: int, dtype=torch.float32):
        rows, cols = np.meshgrid(np.arange(top, top + size), np.arange(left, left + size), indexing="ij")
        return self.pixel_rays(rows, cols, dtype=dtype)

    def project(self, points: np.ndarray):
        """Project world points; returns ``(u, v, z)`` with ``z`` the depth along the optical axis."""
        p = np.asarray(points, dtype=np.float64)
        p_cam = (p - self.center) @ self.rotation
        z = -p_cam[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * p_cam[..., 0] / z + self.cx
            v = -self.fy * p_cam[..., 1] / z + self.cy
        return u, v, z

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height, "c2w": self.c2w.tolist()}


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """Camera-to-world matrix for a camera at ``eye`` looking towards ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    right /= np.linalg.norm(right)
    true_up = np.cross(right, forward)
    c2w = np.eye(4)
    c2w[:3, 0] = right
    c2w[:3, 1] = true_up
    c2w[:3, 2] = -forward
    c2w[:3, 3] = eye
    return c2w


def interpolate_pose(c2w_a: np.ndarray, c2w_b: np.ndarray, weight: float) -> np.ndarray:
    """Linear blend of camera centers with spherical interpolation of rotations."""
    rots = Rotation.from_matrix(np.stack([c2w_a[:3, :3], c2w_b[:3, :3]]))
    R = Slerp([0.0, 1.0], rots)([weight]).as_matrix()[0]
    out = np.eye(4)
    out[:3, :3] = R
    out[:3, 3] = (1.0 - weight) * c2w_a[:3, 3] + weight * c2w_b[:3, 3]
    return out


def jitter_rotation(c2w: np.ndarray, max_degrees: float, rng: np.random.Generator) -> np.ndarray:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = np.deg2rad(rng.uniform(0.0, max_degrees))
    out = c2w.copy()
    out[:3, :3] = Rotation.from_rotvec(axis * angle).as_matrix() @ c2w[:3, :3]
    return out
