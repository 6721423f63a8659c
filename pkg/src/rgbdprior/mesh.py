"""Triangle meshes, ASCII PLY I/O and area-weighted surface sampling."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class TriangleMesh:
    vertices: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    faces: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)

    def __len__(self) -> int:
        return len(self.faces)

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]

    def centroids(self) -> np.ndarray:
        return self.triangles().mean(1)

    def areas(self) -> np.ndarray:
        tri = self.triangles()
        return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)

    def submesh(self, keep_faces: np.ndarray) -> "TriangleMesh":
        faces = self.faces[keep_faces]
        used, inverse = np.unique(faces, return_inverse=True)
        return TriangleMesh(self.vertices[used], inverse.reshape(-1, 3))

    @staticmethod
    def concatenate(meshes) -> "TriangleMesh":
        verts, faces, offset = [], [], 0
        for m in meshes:
            verts.append(m.vertices)
            faces.append(m.faces + offset)
            offset += len(m.vertices)
        if not verts:
            return TriangleMesh()
        return TriangleMesh(np.concatenate(verts), np.concatenate(faces))


def sample_surface(mesh: TriangleMesh, n: int, seed: int = 0) -> np.ndarray:
    """``n`` points distributed uniformly by area over the mesh surface."""
    if mesh.is_empty:
        raise ValueError("cannot sample an empty mesh")
    rng = np.random.default_rng(seed)
    areas = mesh.areas()
    face = rng.choice(len(areas), size=n, p=areas / areas.sum())
    r1, r2 = rng.random(n), rng.random(n)
    s = np.sqrt(r1)
    a, b, c = (mesh.vertices[mesh.faces[face, k]] for k in range(3))
    return (1 - s)[:, None] * a + (s * (1 - r2))[:, None] * b + (s * r2)[:, None] * c


def write_ply(path, vertices: np.ndarray, faces: np.ndarray | None = None) -> None:
    """ASCII PLY; ``faces=None`` writes a point cloud."""
    vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    faces = np.zeros((0, 3), dtype=np.int64) if faces is None else np.asarray(faces).reshape(-1, 3)
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(vertices)}\nproperty double x\nproperty double y\nproperty double z\n")
        if len(faces):
            fh.write(f"element face {len(faces)}\nproperty list uchar int vertex_indices\n")
        fh.write("end_header\n")
        np.savetxt(fh, vertices, fmt="%.17g")
        if len(faces):
            np.savetxt(fh, np.hstack([np.full((len(faces), 1), 3), faces]).astype(np.int64), fmt="%d")


def read_ply(path) -> TriangleMesh:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ValueError(f"{path}: not a PLY file")
    n_vert = n_face = 0
    i = 1
    while i < len(lines) and lines[i].strip() != "end_header":
        parts = lines[i].split()
        if parts[:2] == ["element", "vertex"]:
            n_vert = int(parts[2])
        elif parts[:2] == ["element", "face"]:
            n_face = int(parts[2])
        elif parts[:2] == ["format", "binary_little_endian"]:
            raise ValueError(f"{path}: only ASCII PLY is supported")
        i += 1
    if i == len(lines):
        raise ValueError(f"{path}: missing end_header")
    body = lines[i + 1:]
    if len(body) < n_vert + n_face:
        raise ValueError(f"{path}: truncated PLY body")
    verts = np.loadtxt(body[:n_vert], usecols=(0, 1, 2), ndmin=2) if n_vert else np.zeros((0, 3))
    faces = (np.loadtxt(body[n_vert:n_vert + n_face], usecols=(1, 2, 3), dtype=np.int64, ndmin=2)
             if n_face else np.zeros((0, 3), dtype=np.int64))
    return TriangleMesh(verts, faces)
