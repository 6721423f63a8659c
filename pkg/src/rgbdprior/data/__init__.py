from .corpus import PatchCorpus, build_patch_corpus, read_corpus, write_corpus
from .io import LoadError, load_scene, read_depth, save_scene, write_depth
from .scene import SceneDataset, select_views
from .synthetic import (
    Box,
    CameraRig,
    Plane,
    SceneSpec,
    Sphere,
    Texture,
    default_scene_spec,
    generate_synthetic_scene,
    random_scene_spec,
    surface_distance,
    trace,
)

__all__ = [
    "Box", "CameraRig", "LoadError", "PatchCorpus", "Plane", "SceneDataset", "SceneSpec", "Sphere", "Texture",
    "build_patch_corpus", "default_scene_spec", "generate_synthetic_scene", "load_scene", "random_scene_spec",
    "read_corpus", "read_depth", "save_scene", "select_views", "surface_distance", "trace", "write_corpus",
    "write_depth",
]
