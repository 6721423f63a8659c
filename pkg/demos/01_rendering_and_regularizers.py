"""Walk through one ray batch: sampling, compositing and the geometric regularizers.

Run: python demos/01_rendering_and_regularizers.py
"""

import numpy as np
import torch

from rgbdprior.data import CameraRig, default_scene_spec, generate_synthetic_scene, select_views
from rgbdprior.fields import EncodingConfig, RadianceField
from rgbdprior.regularizers import FrustumSet, distortion_loss, foreground_loss, frustum_loss, photometric_loss
from rgbdprior.volume_rendering import render_rays

torch.manual_seed(0)

# A small ray-traced room with exact depth; three views are kept for training.
scene = select_views(generate_synthetic_scene(default_scene_spec(rig=CameraRig(width=64, height=64))), 3)
print(f"train views {scene.train_ids}, held-out views {scene.test_ids}, near/far {scene.near}/{scene.far}")

# A fresh field has a uniform low density, so every ray sees a faint fog.
field = RadianceField(scene.bounds, EncodingConfig(n_levels=4), dtype=torch.float64)
cam = scene.cameras[scene.train_ids[0]]
rows, cols = np.meshgrid(np.arange(0, 64, 8), np.arange(0, 64, 8), indexing="ij")
origins, dirs = cam.pixel_rays(rows.ravel(), cols.ravel(), dtype=torch.float64)
res = render_rays(field, origins, dirs, scene.near, scene.far, 64)
print(f"mean opacity {res.weight_sum.mean():.3f}, mean expected depth {res.depth.mean():.3f}")

# The four per-ray losses that make up the geometric objective.
target = torch.as_tensor(scene.images[scene.train_ids[0]][rows, cols].reshape(-1, 3))
frustums = FrustumSet(scene.train_cameras, scene.near, scene.far)
with torch.no_grad():
    losses = {"photometric": photometric_loss(res.color, target), "foreground": foreground_loss(res.samples),
              "frustum": frustum_loss(res.samples, frustums), "distortion": distortion_loss(res.samples, res.depth)}
for name, value in losses.items():
    print(f"{name:12s}{float(value):.4f}")

# Points seen by a single training camera are what the frustum term penalizes.
counts = frustums.count(res.samples.points.reshape(-1, 3).numpy())
print("samples by number of covering frustums:", np.bincount(counts, minlength=4))
