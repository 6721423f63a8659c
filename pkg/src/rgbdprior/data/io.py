"""On-disk scene layout.

::

    scene/
      cameras.json      {"w","h","fx","fy","cx","cy","near","far","scale","frames":[{"file","c2w"}]}
      images/000.png    8-bit RGB
      depth/000.bin     optional ground-truth depth (see write_depth)
      masks/000.png     optional object masks
      mesh.ply          optional ground-truth mesh (ASCII)

``c2w`` is the row-major camera-to-world matrix; cameras look down -z with +y up.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from ..cameras import CameraPose, validate_rotation
from ..mesh import read_ply, write_ply
from .scene import SceneDataset, select_views

DEPTH_MAGIC = b"RGBDDEP1"
_DEPTH_HEADER = struct.Struct("<8sII")


class LoadError(ValueError):
    """A dataset, corpus or checkpoint file is missing or malformed."""


def write_depth(path, depth: np.ndarray) -> None:
    """Little-endian float32 depth map behind a 16-byte header (magic, height, width)."""
    depth = np.asarray(depth, dtype="<f4")
    h, w = depth.shape
    with open(path, "wb") as fh:
        fh.write(_DEPTH_HEADER.pack(DEPTH_MAGIC, h, w))
        fh.write(depth.tobytes())


def read_depth(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _DEPTH_HEADER.size:
        raise LoadError(f"{path}: truncated depth header")
    magic, h, w = _DEPTH_HEADER.unpack_from(raw)
    if magic != DEPTH_MAGIC:
        raise LoadError(f"{path}: bad depth magic {magic!r}")
    body = raw[_DEPTH_HEADER.size:]
    if len(body) != 4 * h * w:
        raise LoadError(f"{path}: expected {h}x{w} float32 values")
    return np.frombuffer(body, dtype="<f4").reshape(h, w).astype(np.float64)


def save_scene(scene: SceneDataset, path) -> None:
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    cam0 = scene.cameras[0]
    for cam in scene.cameras:
        if (cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height) != (cam0.fx, cam0.fy, cam0.cx, cam0.cy,
                                                                        cam0.width, cam0.height):
            raise ValueError("cameras.json stores one shared set of intrinsics")
    frames = []
    for i, (img, cam) in enumerate(zip(scene.images, scene.cameras)):
        name = f"images/{i:03d}.png"
        Image.fromarray(np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)).save(root / name)
        frames.append({"file": name, "c2w": [float(x) for x in cam.c2w.ravel()]})
    meta = {"w": int(cam0.width), "h": int(cam0.height), "fx": float(cam0.fx), "fy": float(cam0.fy),
            "cx": float(cam0.cx), "cy": float(cam0.cy), "near": float(scene.near), "far": float(scene.far),
            "scale": float(scene.scale), "frames": frames}
    (root / "cameras.json").write_text(json.dumps(meta, indent=1))
    if scene.depths is not None:
        (root / "depth").mkdir(exist_ok=True)
        for i, d in enumerate(scene.depths):
            write_depth(root / "depth" / f"{i:03d}.bin", d)
    if scene.masks is not None:
        (root / "masks").mkdir(exist_ok=True)
        for i, m in enumerate(scene.masks):
            Image.fromarray(np.asarray(m, dtype=np.uint8) * 255).save(root / "masks" / f"{i:03d}.png")
    if scene.mesh is not None:
        write_ply(root / "mesh.ply", scene.mesh.vertices, scene.mesh.faces)


def _require(meta: dict, key: str, kind):
    if key not in meta:
        raise LoadError(f"cameras.json: missing key {key!r}")
    try:
        return kind(meta[key])
    except (TypeError, ValueError) as exc:
        raise LoadError(f"cameras.json: bad value for {key!r}: {meta[key]!r}") from exc


def load_scene(path, n_views: int | None = None, holdout_every: int | None = None) -> SceneDataset:
    """Load and validate a scene directory.

    With ``n_views`` (or ``holdout_every``) set, the view subset is applied via
    :func:`select_views`; otherwise every view is a training view.
    """
    root = Path(path)
    cam_file = root / "cameras.json"
    if not cam_file.is_file():
        raise LoadError(f"{root}: missing cameras.json")
    try:
        meta = json.loads(cam_file.read_text())
    except json.JSONDecodeError as exc:
        raise LoadError(f"{cam_file}: invalid JSON ({exc})") from exc
    w, h = _require(meta, "w", int), _require(meta, "h", int)
    fx, fy, cx, cy = (_require(meta, k, float) for k in ("fx", "fy", "cx", "cy"))
    near, far, scale = (_require(meta, k, float) for k in ("near", "far", "scale"))
    frames = meta.get("frames")
    if not isinstance(frames, list) or not frames:
        raise LoadError(f"{cam_file}: 'frames' must be a non-empty list")

    images, cameras, depths, masks = [], [], [], []
    for i, fr in enumerate(frames):
        c2w = np.asarray(fr.get("c2w", []), dtype=np.float64)
        if c2w.size != 16:
            raise LoadError(f"{cam_file}: frame {i} c2w must have 16 values")
        c2w = c2w.reshape(4, 4)
        try:
            validate_rotation(c2w[:3, :3])
        except ValueError as exc:
            raise LoadError(f"{cam_file}: frame {i}: {exc}") from exc
        img_path = root / fr.get("file", "")
        if not img_path.is_file():
            raise LoadError(f"{root}: missing image {fr.get('file')!r}")
        img = np.asarray(Image.open(img_path).convert("RGB"), dtype=np.float64) / 255.0
        if img.shape[:2] != (h, w):
            raise LoadError(f"{img_path}: size {img.shape[1]}x{img.shape[0]} does not match {w}x{h}")
        images.append(img)
        cameras.append(CameraPose(fx, fy, cx, cy, w, h, c2w))
        stem = Path(fr["file"]).stem
        depth_path, mask_path = root / "depth" / f"{stem}.bin", root / "masks" / f"{stem}.png"
        depths.append(read_depth(depth_path) if depth_path.is_file() else None)
        masks.append(np.asarray(Image.open(mask_path)) > 127 if mask_path.is_file() else None)

    mesh = read_ply(root / "mesh.ply") if (root / "mesh.ply").is_file() else None
    try:
        scene = SceneDataset(images, cameras, near, far, scale,
                             depths=depths if all(d is not None for d in depths) else None,
                             mesh=mesh, masks=masks if all(m is not None for m in masks) else None)
    except ValueError as exc:
        raise LoadError(f"{root}: {exc}") from exc
    if n_views is not None or holdout_every is not None:
        scene = select_views(scene, n_views, 8 if holdout_every is None else holdout_every)
    return scene
