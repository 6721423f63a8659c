"""Image metrics, mesh extraction from a density field, visibility culling and chamfer scoring."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numba
import numpy as np
import torch
from scipy.ndimage import correlate1d
from scipy.spatial import cKDTree
from skimage.measure import marching_cubes

from .mesh import TriangleMesh
from .regularizers import FrustumSet

log = logging.getLogger(__name__)

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
DEFAULT_ISO_SIGMA = 25.0


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio for images in [0, 1], capped at 99 dB."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP)


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean structural similarity over valid 11x11 Gaussian windows (sigma 1.5).

    Color images are converted to grayscale by averaging channels.
    """
    a, b = _check_pair(a, b)
    if a.ndim == 3:
        a, b = a.mean(-1), b.mean(-1)
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for SSIM")
    g = _gaussian_window()
    pad = SSIM_WINDOW // 2

    def filt(x):
        y = correlate1d(correlate1d(x, g, axis=0, mode="constant"), g, axis=1, mode="constant")
        return y[pad:-pad, pad:-pad]

    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    smap = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return float(smap.mean())


def average_metric(psnr_db: float, ssim_value: float, lpips: float | None = None) -> tuple[float, bool]:
    """Geometric-mean error composite; returns ``(value, partial)``.

    Without LPIPS the composite is the geometric mean of the two available
    factors and ``partial`` is True.
    """
    if ssim_value > 1.0:
        raise ValueError("ssim cannot exceed 1")
    factors = [10.0 ** (-psnr_db / 10.0), math.sqrt(1.0 - ssim_value)]
    if lpips is not None:
        if lpips < 0:
            raise ValueError("lpips must be non-negative")
        factors.append(lpips)
    return float(np.prod(factors) ** (1.0 / len(factors))), lpips is None


@dataclass
class MetricReport:
    psnr: float
    ssim: float
    lpips: float | None
    average: float
    partial: bool
    per_view: list[dict] = field(default_factory=list)
    chamfer: float | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)


def image_report(renders, targets, view_ids=None, lpips=None) -> MetricReport:
    """Per-view PSNR/SSIM (and optional LPIPS scores), averaged over views.

    ``lpips`` is an optional sequence of externally computed per-view scores.
    """
    rows = []
    for k, (r, t) in enumerate(zip(renders, targets)):
        row = {"view": int(view_ids[k]) if view_ids is not None else k, "psnr": psnr(r, t), "ssim": ssim(r, t)}
        if lpips is not None:
            row["lpips"] = float(lpips[k])
        row["average"], row["partial"] = average_metric(row["psnr"], row["ssim"], row.get("lpips"))
        rows.append(row)
    mean = {k: float(np.mean([r[k] for r in rows])) for k in ("psnr", "ssim", "average")}
    mean_lpips = float(np.mean([r["lpips"] for r in rows])) if lpips is not None else None
    return MetricReport(mean["psnr"], mean["ssim"], mean_lpips, mean["average"], lpips is None, rows)


def density_grid(density_fn, bounds, resolution: int, chunk: int = 65536) -> np.ndarray:
    """Evaluate ``density_fn`` on a ``resolution**3`` lattice spanning ``bounds`` (inclusive)."""
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    axes = [np.linspace(lo[k], hi[k], resolution) for k in range(3)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 3)
    out = np.empty(len(pts))
    for i in range(0, len(pts), chunk):
        out[i:i + chunk] = np.asarray(density_fn(pts[i:i + chunk]), dtype=np.float64).reshape(-1)
    return out.reshape(resolution, resolution, resolution)


def field_density_fn(field_model):
    def fn(points):
        with torch.no_grad():
            x = torch.as_tensor(points, dtype=field_model.lo.dtype)
            return field_model.query_density(x).cpu().numpy()
    return fn


def extract_mesh(density, grid_resolution: int = 128, iso_sigma: float = DEFAULT_ISO_SIGMA,
                 bounds=None) -> TriangleMesh:
    """Marching-cubes isosurface of the density at ``iso_sigma``.

    ``density`` is either a radiance field (bounds default to its box) or a
    callable mapping ``(n, 3)`` points to densities, in which case ``bounds``
    is required.
    """
    if grid_resolution < 16:
        raise ValueError("grid_resolution must be at least 16")
    if callable(getattr(density, "query_density", None)):
        if bounds is None:
            bounds = (density.lo.tolist(), density.hi.tolist())
        density = field_density_fn(density)
    if bounds is None:
        raise ValueError("bounds are required for a density callable")
    vol = density_grid(density, bounds, grid_resolution)
    if not (vol.min() < iso_sigma < vol.max()):
        log.warning("density never crosses iso level %g; returning an empty mesh", iso_sigma)
        return TriangleMesh()
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    spacing = (hi - lo) / (grid_resolution - 1)
    verts, faces, _, _ = marching_cubes(vol, level=iso_sigma, spacing=tuple(spacing))
    return TriangleMesh(verts + lo, faces)


@numba.njit(cache=True)
def _rasterize_depth(uvz, faces, width, height, zmin):
    zbuf = np.full((height, width), np.inf)
    for f in range(faces.shape[0]):
        i0, i1, i2 = faces[f, 0], faces[f, 1], faces[f, 2]
        z0, z1, z2 = uvz[i0, 2], uvz[i1, 2], uvz[i2, 2]
        if z0 <= zmin or z1 <= zmin or z2 <= zmin:
            continue
        x0, y0 = uvz[i0, 0], uvz[i0, 1]
        x1, y1 = uvz[i1, 0], uvz[i1, 1]
        x2, y2 = uvz[i2, 0], uvz[i2, 1]
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if abs(area) < 1e-12:
            continue
        c0 = max(int(np.floor(min(x0, x1, x2))), 0)
        c1 = min(int(np.ceil(max(x0, x1, x2))), width - 1)
        r0 = max(int(np.floor(min(y0, y1, y2))), 0)
        r1 = min(int(np.ceil(max(y0, y1, y2))), height - 1)
        for r in range(r0, r1 + 1):
            py = r + 0.5
            for c in range(c0, c1 + 1):
                px = c + 0.5
                b0 = ((x1 - px) * (y2 - py) - (x2 - px) * (y1 - py)) / area
                b1 = ((x2 - px) * (y0 - py) - (x0 - px) * (y2 - py)) / area
                b2 = 1.0 - b0 - b1
                if b0 < 0 or b1 < 0 or b2 < 0:
                    continue
                z = 1.0 / (b0 / z0 + b1 / z1 + b2 / z2)
                if z < zbuf[r, c]:
                    zbuf[r, c] = z
    return zbuf


def depth_buffer(mesh: TriangleMesh, camera, zmin: float = 1e-6) -> np.ndarray:
    """Per-pixel nearest optical-axis depth of the mesh seen from ``camera`` (``inf`` where empty)."""
    u, v, z = camera.project(mesh.vertices)
    uvz = np.stack([u, v, z], -1)
    return _rasterize_depth(uvz, mesh.faces, int(camera.width), int(camera.height), zmin)


def cull_mesh(mesh: TriangleMesh, frustums: FrustumSet, masks=None, tolerance: float = 0.02) -> TriangleMesh:
    """Keep faces whose centroid lies in a training frustum and passes a depth test there.

    ``tolerance`` (world units, typically one voxel) is the depth-test slack.
    With object ``masks`` (one boolean image per camera), faces that land only
    on background pixels in every view are removed as well.
    """
    if mesh.is_empty:
        return mesh
    cent = mesh.centroids()
    inside = frustums.contains(cent)
    visible = np.zeros(len(cent), dtype=bool)
    on_object = np.zeros(len(cent), dtype=bool)
    for k, cam in enumerate(frustums.cameras):
        sel = inside[:, k]
        if not sel.any():
            continue
        u, v, z = cam.project(cent[sel])
        col = np.clip(np.floor(u).astype(int), 0, cam.width - 1)
        row = np.clip(np.floor(v).astype(int), 0, cam.height - 1)
        zbuf = depth_buffer(mesh, cam)
        ok = z <= zbuf[row, col] + tolerance
        idx = np.flatnonzero(sel)
        visible[idx[ok]] = True
        if masks is not None:
            on_object[idx] |= np.asarray(masks[k], dtype=bool)[row, col]
    keep = visible & on_object if masks is not None else visible
    return mesh.submesh(keep)


def chamfer_l1(pred_points, gt_points) -> float:
    """Symmetric mean nearest-neighbor Euclidean distance between two point clouds."""
    pred = np.asarray(pred_points, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt_points, dtype=np.float64).reshape(-1, 3)
    if len(pred) == 0 or len(gt) == 0:
        raise ValueError("chamfer distance needs two non-empty point clouds")
    d_pred, _ = cKDTree(gt).query(pred)
    d_gt, _ = cKDTree(pred).query(gt)
    return 0.5 * (float(d_pred.mean()) + float(d_gt.mean()))


def render_views(field_model, scene, view_ids, n_samples: int = 128):
    """Rendered ``(rgb, depth)`` pairs for the given views."""
    from .volume_rendering import render_image

    return [render_image(field_model, scene.cameras[i], scene.near, scene.far, n_samples) for i in view_ids]


def evaluate_views(field_model, scene, view_ids=None, n_samples: int = 128) -> MetricReport:
    """Image metrics on held-out views (``scene.test_ids`` by default)."""
    view_ids = list(scene.test_ids if view_ids is None else view_ids)
    if not view_ids:
        raise ValueError("no held-out views to evaluate")
    renders = [rgb for rgb, _ in render_views(field_model, scene, view_ids, n_samples)]
    return image_report(renders, [scene.images[i] for i in view_ids], view_ids)


def geometry_chamfer(field_model, scene, grid_resolution: int = 128, iso_sigma: float = DEFAULT_ISO_SIGMA,
                     n_points: int = 100_000, seed: int = 0, use_masks: bool = False) -> float:
    """Chamfer distance between visibility-culled predicted and ground-truth surfaces.

    Both meshes are culled against the training cameras so that geometry no
    input view could observe is ignored on either side. Returns ``inf`` when
    the predicted surface is empty after culling.
    """
    from .mesh import sample_surface

    if scene.mesh is None:
        raise ValueError("scene has no ground-truth mesh")
    frustums = FrustumSet(scene.train_cameras, scene.near, scene.far)
    masks = [scene.masks[i] for i in scene.train_ids] if use_masks and scene.masks is not None else None
    voxel = float(np.max(field_model.hi.cpu().numpy() - field_model.lo.cpu().numpy())) / (grid_resolution - 1)
    pred = cull_mesh(extract_mesh(field_model, grid_resolution, iso_sigma), frustums, masks, tolerance=voxel)
    gt = cull_mesh(scene.mesh, frustums, masks, tolerance=voxel)
    if pred.is_empty:
        return math.inf
    return chamfer_l1(sample_surface(pred, n_points, seed), sample_surface(gt, n_points, seed + 1))
