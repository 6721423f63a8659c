"""RGBD patch corpora for training the prior.

File layout: a 64-byte little-endian header followed by ``count`` records of
``P*P*4`` float32 values (row-major, channel-last)::

    0   8s  magic b"RGBDPC01"
    8   u32 format version
    12  u32 patch encoding version
    16  u32 P
    20  u32 channels (4)
    24  u64 count
    32  f64 scene scale
    40  24 bytes zero padding
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..ddm.patch import ENCODING_VERSION, encode_rgbd
from .io import LoadError
from .scene import SceneDataset

MAGIC = b"RGBDPC01"
FORMAT_VERSION = 1
HEADER_SIZE = 64
_HEADER = struct.Struct("<8sIIIIQd")


@dataclass
class PatchCorpus:
    patches: np.ndarray  # (count, P, P, 4) float32
    scene_scale: float
    encoding_version: int = ENCODING_VERSION

    @property
    def count(self) -> int:
        return self.patches.shape[0]

    @property
    def patch_size(self) -> int:
        return self.patches.shape[1]


def build_patch_corpus(scenes: list[SceneDataset], patches_per_image: int, patch_size: int = 48,
                       seed: int = 0) -> PatchCorpus:
    """Random windows from every image with ground-truth depth.

    Windows containing any non-finite depth (rays that hit nothing) are dropped.
    All scenes must share one scene scale.
    """
    rng = np.random.default_rng(seed)
    scales = {float(s.scale) for s in scenes}
    if len(scales) > 1:
        raise ValueError("all scenes in a corpus must share one scene scale")
    out = []
    for scene in scenes:
        if scene.depths is None:
            raise ValueError("build_patch_corpus requires ground-truth depth")
        for img, depth in zip(scene.images, scene.depths):
            h, w = depth.shape
            if h < patch_size or w < patch_size:
                continue
            tops = rng.integers(0, h - patch_size + 1, patches_per_image)
            lefts = rng.integers(0, w - patch_size + 1, patches_per_image)
            for top, left in zip(tops, lefts):
                d = depth[top:top + patch_size, left:left + patch_size]
                if not np.all(np.isfinite(d)):
                    continue
                rgb = img[top:top + patch_size, left:left + patch_size]
                out.append(encode_rgbd(rgb, d, scene.scale).astype(np.float32))
    if not out:
        raise ValueError("no valid patches could be extracted")
    return PatchCorpus(np.clip(np.stack(out), -1.0, 1.0), scales.pop())


def write_corpus(corpus: PatchCorpus, path) -> None:
    data = np.ascontiguousarray(corpus.patches, dtype="<f4")
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, corpus.encoding_version, corpus.patch_size, 4,
                          corpus.count, corpus.scene_scale)
    with open(path, "wb") as fh:
        fh.write(header.ljust(HEADER_SIZE, b"\0"))
        fh.write(data.tobytes())


def read_corpus(path) -> PatchCorpus:
    path = Path(path)
    if not path.is_file():
        raise LoadError(f"{path}: corpus file not found")
    with open(path, "rb") as fh:
        head = fh.read(HEADER_SIZE)
        if len(head) != HEADER_SIZE:
            raise LoadError(f"{path}: truncated corpus header")
        magic, fmt, enc, p, ch, count, scale = _HEADER.unpack_from(head)
        if magic != MAGIC or fmt != FORMAT_VERSION:
            raise LoadError(f"{path}: not an RGBD patch corpus (magic {magic!r}, version {fmt})")
        if ch != 4 or p < 1 or count < 1:
            raise LoadError(f"{path}: corrupt header (P={p}, channels={ch}, count={count})")
        body = fh.read()
    if len(body) != 4 * count * p * p * ch:
        raise LoadError(f"{path}: expected {count} records of {p}x{p}x{ch} float32")
    patches = np.frombuffer(body, dtype="<f4").reshape(count, p, p, ch).astype(np.float32)
    return PatchCorpus(patches, scale, enc)
