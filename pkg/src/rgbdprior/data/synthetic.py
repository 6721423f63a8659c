"""Procedural ray-traced scenes with exact depth, meshes and object masks."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import torch

from ..cameras import CameraPose, look_at
from ..mesh import TriangleMesh
from .scene import SceneDataset

_EPS = 1e-9


@dataclass
class Texture:
    kind: str = "checker"  # checker | stripes | noise | constant
    frequency: float = 8.0  # pattern periods per world unit

    def __post_init__(self):
        if self.kind not in ("checker", "stripes", "noise", "constant"):
            raise ValueError(f"unknown texture kind {self.kind!r}")


@dataclass
class Plane:
    """Rectangle ``center + a*u + b*v`` with ``|a| <= half_u``, ``|b| <= half_v`` (u, v orthonormal)."""

    center: tuple
    u: tuple
    v: tuple
    half_u: float
    half_v: float
    texture: Texture = field(default_factory=Texture)
    is_object: bool = False


@dataclass
class Sphere:
    center: tuple
    radius: float
    texture: Texture = field(default_factory=lambda: Texture("noise"))
    is_object: bool = True


@dataclass
class Box:
    """Axis-aligned box, expanded into six rectangles for tracing and meshing."""

    center: tuple
    half: tuple
    texture: Texture = field(default_factory=lambda: Texture("stripes"))
    is_object: bool = True

    def faces(self) -> list[Plane]:
        c = np.asarray(self.center, dtype=np.float64)
        h = np.asarray(self.half, dtype=np.float64)
        out = []
        for axis in range(3):
            a, b = [k for k in range(3) if k != axis]
            u, v = np.eye(3)[a], np.eye(3)[b]
            for sign in (-1.0, 1.0):
                fc = c.copy()
                fc[axis] += sign * h[axis]
                out.append(Plane(tuple(fc), tuple(u), tuple(v), h[a], h[b], self.texture, self.is_object))
        return out


@dataclass
class CameraRig:
    """Cameras on a circle in the plane ``z = center[2]``, all looking at ``target``."""

    n_views: int = 16
    center: tuple = (0.0, 0.0, 0.7)
    radius: float = 0.3
    target: tuple = (0.0, 0.0, -0.5)
    width: int = 128
    height: int = 128
    fov_deg: float = 60.0

    def cameras(self) -> list[CameraPose]:
        f = 0.5 * self.width / np.tan(np.deg2rad(self.fov_deg) / 2)
        cams = []
        for k in range(self.n_views):
            phi = 2 * np.pi * k / self.n_views
            eye = np.asarray(self.center) + self.radius * np.array([np.cos(phi), np.sin(phi), 0.0])
            cams.append(CameraPose(f, f, self.width / 2, self.height / 2, self.width, self.height,
                                   look_at(eye, self.target)))
        return cams


@dataclass
class SceneSpec:
    primitives: list
    rig: CameraRig = field(default_factory=CameraRig)
    near: float = 0.05
    far: float = 2.5
    scale: float = 1.0
    light: tuple = (0.3, 0.8, 0.5)

    def planes_and_spheres(self):
        flat = []
        for p in self.primitives:
            flat.extend(p.faces() if isinstance(p, Box) else [p])
        return flat


def room_box(half=(0.95, 0.95, 0.95), texture: Texture | None = None) -> list[Plane]:
    """Inside faces of a room; marked as background for mask purposes."""
    box = Box((0.0, 0.0, 0.0), half, texture or Texture("checker", 4.0), is_object=False)
    return box.faces()


def default_scene_spec(**overrides) -> SceneSpec:
    prims = room_box(texture=Texture("checker", 4.0))
    prims[2] = replace(prims[2], texture=Texture("noise", 3.0))  # floor
    prims += [
        Sphere((-0.3, -0.6, -0.35), 0.3, Texture("noise", 6.0)),
        Box((0.35, -0.7, -0.45), (0.22, 0.22, 0.22), Texture("stripes", 10.0)),
        Sphere((0.25, 0.25, -0.7), 0.18, Texture("checker", 12.0)),
    ]
    spec = SceneSpec(prims)
    return replace(spec, **overrides)


def random_scene_spec(seed: int, **overrides) -> SceneSpec:
    """Room with a random assortment of spheres and boxes; used to diversify patch corpora."""
    rng = np.random.default_rng(seed)
    kinds = ["checker", "stripes", "noise", "constant"]
    prims = [replace(p, texture=Texture(str(rng.choice(kinds)), float(rng.uniform(2, 10))))
             for p in room_box()]
    for _ in range(int(rng.integers(2, 6))):
        tex = Texture(str(rng.choice(kinds)), float(rng.uniform(3, 14)))
        size = float(rng.uniform(0.1, 0.3))
        pos = (float(rng.uniform(-0.6, 0.6)), float(rng.uniform(-0.9 + size, 0.4)), float(rng.uniform(-0.8, 0.0)))
        if rng.random() < 0.5:
            prims.append(Sphere(pos, size, tex))
        else:
            prims.append(Box(pos, tuple(rng.uniform(0.5, 1.0, 3) * size), tex))
    return replace(SceneSpec(prims), **overrides)


def _palette(rng: np.random.Generator, n: int):
    return [(rng.uniform(0.05, 0.95, 3), rng.uniform(0.05, 0.95, 3), rng.uniform(0, 2 * np.pi, 6)) for _ in range(n)]


def _texture_color(tex: Texture, a, b, palette):
    c0, c1, phase = palette
    f = tex.frequency
    if tex.kind == "constant":
        mix = np.zeros_like(a)
    elif tex.kind == "checker":
        mix = (np.floor(a * f) + np.floor(b * f)) % 2
    elif tex.kind == "stripes":
        mix = np.floor(a * f + 0.5 * np.sin(b * f + phase[0])) % 2
    else:
        mix = 0.5 + (np.sin(f * a + phase[0]) * np.cos(0.7 * f * b + phase[1])
                     + 0.5 * np.sin(1.9 * f * (a + b) + phase[2])) / 3.0
    return (1 - mix)[..., None] * c0 + mix[..., None] * c1


def _intersect_plane(p: Plane, o, d):
    c, u, v = (np.asarray(x, dtype=np.float64) for x in (p.center, p.u, p.v))
    n = np.cross(u, v)
    denom = d @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        t = ((c - o) @ n) / denom
    hit = o + t[:, None] * d
    a, b = (hit - c) @ u, (hit - c) @ v
    ok = (np.abs(denom) > _EPS) & (t > _EPS) & (np.abs(a) <= p.half_u) & (np.abs(b) <= p.half_v)
    return np.where(ok, t, np.inf), np.broadcast_to(n, d.shape), a, b


def _intersect_sphere(s: Sphere, o, d):
    c = np.asarray(s.center, dtype=np.float64)
    oc = o - c
    b = np.einsum("ij,ij->i", oc, d)
    disc = b * b - (np.einsum("ij,ij->i", oc, oc) - s.radius ** 2)
    sq = np.sqrt(np.maximum(disc, 0.0))
    t0, t1 = -b - sq, -b + sq
    t = np.where(t0 > _EPS, t0, np.where(t1 > _EPS, t1, np.inf))
    t = np.where(disc >= 0, t, np.inf)
    hit = o + np.where(np.isfinite(t), t, 0.0)[:, None] * d
    n = (hit - c) / s.radius
    a = s.radius * np.arctan2(n[:, 2], n[:, 0])
    bb = s.radius * np.arccos(np.clip(n[:, 1], -1, 1))
    return t, n, a, bb


def trace(spec: SceneSpec, origins: np.ndarray, dirs: np.ndarray, palettes=None):
    """Nearest-hit ray tracing; returns ``(rgb, depth, object_mask)`` with ``depth = inf`` on misses."""
    prims = spec.planes_and_spheres()
    if palettes is None:
        palettes = _palette(np.random.default_rng(0), len(prims))
    n_rays = len(origins)
    depth = np.full(n_rays, np.inf)
    rgb = np.ones((n_rays, 3))
    obj = np.zeros(n_rays, dtype=bool)
    light = np.asarray(spec.light, dtype=np.float64)
    light /= np.linalg.norm(light)
    for prim, pal in zip(prims, palettes):
        fn = _intersect_sphere if isinstance(prim, Sphere) else _intersect_plane
        t, n, a, b = fn(prim, origins, dirs)
        closer = t < depth
        if not closer.any():
            continue
        shade = 0.6 + 0.4 * np.abs(n[closer] @ light)
        rgb[closer] = np.clip(_texture_color(prim.texture, a[closer], b[closer], pal) * shade[:, None], 0, 1)
        depth[closer] = t[closer]
        obj[closer] = prim.is_object
    return rgb, depth, obj


def surface_distance(spec: SceneSpec, points: np.ndarray) -> np.ndarray:
    """Unsigned distance from each point to the nearest primitive surface."""
    p = np.asarray(points, dtype=np.float64)
    best = np.full(p.shape[:-1], np.inf)
    for prim in spec.planes_and_spheres():
        if isinstance(prim, Sphere):
            dist = np.abs(np.linalg.norm(p - np.asarray(prim.center), axis=-1) - prim.radius)
        else:
            c, u, v = (np.asarray(x, dtype=np.float64) for x in (prim.center, prim.u, prim.v))
            rel = p - c
            dn = rel @ np.cross(u, v)
            da = np.maximum(np.abs(rel @ u) - prim.half_u, 0.0)
            db = np.maximum(np.abs(rel @ v) - prim.half_v, 0.0)
            dist = np.sqrt(dn ** 2 + da ** 2 + db ** 2)
        best = np.minimum(best, dist)
    return best


def primitive_mesh(prim, spacing: float = 0.05) -> TriangleMesh:
    if isinstance(prim, Sphere):
        n_lat, n_lon = 32, 64
        th = np.linspace(0, np.pi, n_lat + 1)
        ph = np.linspace(0, 2 * np.pi, n_lon, endpoint=False)
        T, P = np.meshgrid(th, ph, indexing="ij")
        verts = np.stack([np.sin(T) * np.cos(P), np.cos(T), np.sin(T) * np.sin(P)], -1).reshape(-1, 3)
        verts = np.asarray(prim.center) + prim.radius * verts
        faces = []
        for i in range(n_lat):
            for j in range(n_lon):
                a, b = i * n_lon + j, i * n_lon + (j + 1) % n_lon
                c, d = a + n_lon, b + n_lon
                faces += [[a, c, b], [b, c, d]]
        return TriangleMesh(verts, faces)
    c, u, v = (np.asarray(x, dtype=np.float64) for x in (prim.center, prim.u, prim.v))
    nu = max(1, int(np.ceil(2 * prim.half_u / spacing)))
    nv = max(1, int(np.ceil(2 * prim.half_v / spacing)))
    A, B = np.meshgrid(np.linspace(-prim.half_u, prim.half_u, nu + 1),
                       np.linspace(-prim.half_v, prim.half_v, nv + 1), indexing="ij")
    verts = c + A.reshape(-1, 1) * u + B.reshape(-1, 1) * v
    idx = np.arange((nu + 1) * (nv + 1)).reshape(nu + 1, nv + 1)
    a, b, cc, d = idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel(), idx[1:, :-1].ravel(), idx[1:, 1:].ravel()
    faces = np.concatenate([np.stack([a, cc, b], 1), np.stack([b, cc, d], 1)])
    return TriangleMesh(verts, faces)


def generate_synthetic_scene(spec: SceneSpec, seed: int = 0) -> SceneDataset:
    """Ray-trace every rig camera; the seed drives texture palettes and phases."""
    if not spec.primitives:
        raise ValueError("scene spec has no primitives")
    prims = spec.planes_and_spheres()
    palettes = _palette(np.random.default_rng(seed), len(prims))
    images, depths, masks = [], [], []
    cameras = spec.rig.cameras()
    for cam in cameras:
        rows, cols = np.meshgrid(np.arange(cam.height), np.arange(cam.width), indexing="ij")
        o, d = cam.pixel_rays(rows.ravel(), cols.ravel(), dtype=torch.float64)
        rgb, depth, obj = trace(spec, o.numpy(), d.numpy(), palettes)
        images.append(rgb.reshape(cam.height, cam.width, 3))
        depths.append(depth.reshape(cam.height, cam.width))
        masks.append(obj.reshape(cam.height, cam.width))
    mesh = TriangleMesh.concatenate([primitive_mesh(p) for p in prims])
    return SceneDataset(images, cameras, spec.near, spec.far, spec.scale, depths=depths, mesh=mesh, masks=masks)
