"""RGBD patch value convention shared by the renderer, the corpus and the prior.

Channels 0-2 hold RGB mapped affinely from [0, 1] to [-1, 1]. Channel 3 holds
``e(D) = 2 s / (s + D) - 1`` for depth ``D >= 0`` and scene scale ``s``; the
encoding is bounded in (-1, 1], monotone decreasing and smooth.
"""

import numpy as np
import torch

ENCODING_VERSION = 1


def encode_depth(depth, scale: float):
    return 2.0 * scale / (scale + depth) - 1.0


def decode_depth(encoded, scale: float):
    return scale * (1.0 - encoded) / (1.0 + encoded)


def encode_rgbd(rgb, depth, scale: float):
    """Stack ``rgb`` (..., 3) and ``depth`` (...) into a (..., 4) patch in [-1, 1]."""
    if isinstance(rgb, torch.Tensor):
        return torch.cat([2.0 * rgb - 1.0, encode_depth(depth, scale)[..., None]], -1)
    rgb = np.asarray(rgb)
    return np.concatenate([2.0 * rgb - 1.0, encode_depth(np.asarray(depth), scale)[..., None]], -1)


def decode_rgbd(patch, scale: float):
    """Inverse of :func:`encode_rgbd`; returns ``(rgb, depth)``."""
    return (patch[..., :3] + 1.0) / 2.0, decode_depth(patch[..., 3], scale)
