from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..cameras import CameraPose
from ..mesh import TriangleMesh


@dataclass
class SceneDataset:
    """Posed RGB images of one scene, optionally with ground-truth geometry.

    ``train_ids`` / ``test_ids`` index into ``images``; by default every view
    is a training view.
    """

    images: list[np.ndarray]
    cameras: list[CameraPose]
    near: float
    far: float
    scale: float = 1.0
    depths: list[np.ndarray] | None = None
    mesh: TriangleMesh | None = None
    masks: list[np.ndarray] | None = None
    train_ids: list[int] = field(default_factory=list)
    test_ids: list[int] = field(default_factory=list)

    def __post_init__(self):
        if len(self.images) != len(self.cameras):
            raise ValueError("one camera per image is required")
        if not 0 < self.near < self.far:
            raise ValueError("scene bounds must satisfy 0 < near < far")
        for cam in self.cameras:
            cam.validate()
        if not self.train_ids and not self.test_ids:
            self.train_ids = list(range(len(self.images)))

    def __len__(self) -> int:
        return len(self.images)

    @property
    def bounds(self):
        """Field bounding box: the cube of half-width ``scale`` centred at the origin."""
        s = float(self.scale)
        return (-s, -s, -s), (s, s, s)

    @property
    def train_cameras(self) -> list[CameraPose]:
        return [self.cameras[i] for i in self.train_ids]

    def with_views(self, n_views: int | None, holdout_every: int = 8) -> "SceneDataset":
        return select_views(self, n_views, holdout_every)


def select_views(scene: SceneDataset, n_views: int | None, holdout_every: int = 8) -> SceneDataset:
    """Hold out every ``holdout_every``-th view and keep ``n_views`` evenly spread training views.

    ``n_views=None`` trains on all non-held-out views.
    """
    n = len(scene)
    test = [i for i in range(n) if i % holdout_every == 0] if holdout_every else []
    candidates = [i for i in range(n) if i not in test]
    if n_views is None:
        train = candidates
    else:
        if not 1 <= n_views <= len(candidates):
            raise ValueError(f"cannot select {n_views} training views from {len(candidates)} candidates")
        picks = np.round(np.linspace(0, len(candidates) - 1, n_views)).astype(int)
        train = [candidates[i] for i in picks]
    return SceneDataset(scene.images, scene.cameras, scene.near, scene.far, scene.scale, scene.depths,
                        scene.mesh, scene.masks, train_ids=train, test_ids=test)
