"""Explicit geometry from scalar fields on the domain [-1, 1]^d.

Grids sample fields at cell centers, so resolution ``n`` gives spacing
``2 / n``. Contours and meshes are extracted at a level (0.5 for
occupancy) by marching squares / marching cubes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from skimage import measure

VOX_MAGIC = b"VOX1"


class MeshFormatError(ValueError):
    pass


class GridFormatError(ValueError):
    pass


class SamplingError(ValueError):
    pass


def cell_centers_1d(n: int) -> np.ndarray:
    return -1.0 + (np.arange(n) + 0.5) * (2.0 / n)


def cell_centers(n: int, d: int) -> np.ndarray:
    """All n^d cell centers, row-major (axis 0 slowest), shape [n^d, d]."""
    c = cell_centers_1d(n)
    mesh = np.meshgrid(*([c] * d), indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


@dataclass
class VoxelGrid:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim not in (2, 3) or len(set(v.shape)) != 1:
            raise GridFormatError(f"grid must be n^2 or n^3, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise GridFormatError("grid values must be finite")
        self.values = v

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.ndim

    @property
    def spacing(self) -> float:
        return 2.0 / self.n

    def centers(self) -> np.ndarray:
        return cell_centers(self.n, self.d)

    def index_of(self, points: np.ndarray) -> np.ndarray:
        """Nearest cell index per point, clipped into the grid."""
        idx = np.floor((np.asarray(points) + 1.0) / self.spacing).astype(np.int64)
        return np.clip(idx, 0, self.n - 1)

    def lookup(self, points: np.ndarray) -> np.ndarray:
        idx = self.index_of(points)
        return self.values[tuple(idx.T)]

    def save(self, path) -> None:
        data = np.ascontiguousarray(self.values, dtype="<f4")
        with open(path, "wb") as fh:
            fh.write(VOX_MAGIC + struct.pack("<III", self.d, self.n, 0))
            fh.write(data.tobytes())

    @classmethod
    def load(cls, path) -> "VoxelGrid":
        raw = Path(path).read_bytes()
        if len(raw) < 16 or raw[:4] != VOX_MAGIC:
            raise GridFormatError(f"{path}: not a VOX1 grid")
        d, n, _ = struct.unpack("<III", raw[4:16])
        if d not in (2, 3) or n < 1:
            raise GridFormatError(f"{path}: bad header d={d} n={n}")
        expected = 4 * n**d
        if len(raw) - 16 != expected:
            raise GridFormatError(f"{path}: expected {expected} data bytes, found {len(raw) - 16}")
        values = np.frombuffer(raw, dtype="<f4", offset=16).reshape((n,) * d)
        return cls(values.astype(np.float32))


@dataclass
class Mesh:
    vertices: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    faces: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise MeshFormatError("face index out of range")

    @property
    def empty(self) -> bool:
        return len(self.faces) == 0

    def edges(self) -> np.ndarray:
        """Directed half-edges, one row per face corner."""
        f = self.faces
        return np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])

    def unique_edges(self) -> np.ndarray:
        return np.unique(np.sort(self.edges(), axis=1), axis=0)

    def euler_characteristic(self) -> int:
        used = len(np.unique(self.faces)) if len(self.faces) else 0
        return used - len(self.unique_edges()) + len(self.faces)

    def is_watertight(self) -> bool:
        if self.empty:
            return False
        _, counts = np.unique(np.sort(self.edges(), axis=1), axis=0, return_counts=True)
        return bool(np.all(counts == 2))

    def is_consistently_oriented(self) -> bool:
        if self.empty:
            return False
        _, counts = np.unique(self.edges(), axis=0, return_counts=True)
        return bool(np.all(counts == 1))

    def face_areas(self) -> np.ndarray:
        v = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for x, y, z in self.vertices:
                fh.write(f"v {x:.6f} {y:.6f} {z:.6f}\n")
            for i, j, k in self.faces + 1:
                fh.write(f"f {i} {j} {k}\n")

    @classmethod
    def load(cls, path) -> "Mesh":
        verts, faces = [], []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                parts = line.split()
                if not parts or parts[0].startswith("#"):
                    continue
                try:
                    if parts[0] == "v" and len(parts) == 4:
                        verts.append([float(p) for p in parts[1:]])
                    elif parts[0] == "f" and len(parts) == 4:
                        faces.append([int(p.split("/")[0]) - 1 for p in parts[1:]])
                    else:
                        raise ValueError(parts[0])
                except ValueError:
                    raise MeshFormatError(f"{path}:{lineno}: malformed line {line.strip()!r}") from None
        faces_arr = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
        if faces_arr.size and (faces_arr.min() < 0 or faces_arr.max() >= len(verts)):
            bad = int(np.argmax((faces_arr < 0).any(1) | (faces_arr >= len(verts)).any(1)))
            raise MeshFormatError(f"{path}: face {bad + 1} references a missing vertex")
        return cls(np.asarray(verts, dtype=np.float64).reshape(-1, 3), faces_arr)


def _evaluate(field, points: np.ndarray) -> np.ndarray:
    if hasattr(field, "forward"):
        return np.asarray(field.forward(points))
    return np.asarray(field(points))


def sample_grid(field, n: int, d: int = 3, batch: int = 65536) -> VoxelGrid:
    """Evaluate ``field`` (a callable or an object with ``forward``) at cell centers."""
    if n < 2:
        raise ValueError("resolution must be >= 2")
    d = getattr(getattr(field, "arch", None), "d", d)
    pts = cell_centers(n, d)
    out = np.empty(len(pts), dtype=np.float32)
    for start in range(0, len(pts), batch):
        out[start : start + batch] = _evaluate(field, pts[start : start + batch])
    return VoxelGrid(out.reshape((n,) * d))


def _index_to_domain(coords: np.ndarray, n: int) -> np.ndarray:
    return -1.0 + (coords + 0.5) * (2.0 / n)


def marching_cubes(grid: VoxelGrid, level: float = 0.5) -> Mesh:
    """Triangle mesh of the ``level`` isosurface; empty when nothing crosses."""
    if grid.d != 3:
        raise ValueError("marching_cubes needs a 3D grid")
    v = grid.values
    if not v.min() < level < v.max():
        return Mesh()
    verts, faces, _, _ = measure.marching_cubes(v.astype(np.float64), level, method="lewiner")
    return Mesh(_index_to_domain(verts, grid.n), faces)


def marching_squares(grid: VoxelGrid, level: float = 0.5) -> list[np.ndarray]:
    """Isocontours of a 2D grid as polylines in domain coordinates.

    Closed contours repeat their first point at the end.
    """
    if grid.d != 2:
        raise ValueError("marching_squares needs a 2D grid")
    v = grid.values.astype(np.float64)
    if not v.min() < level < v.max():
        return []
    return [_index_to_domain(c, grid.n) for c in measure.find_contours(v, level)]


def polygon_area(loop: np.ndarray) -> float:
    """Shoelace area of a closed polyline (absolute value)."""
    x, y = loop[:, 0], loop[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def surface_sample(mesh: Mesh, count: int, seed: int = 0) -> np.ndarray:
    """Area-weighted uniform points on the mesh surface, shape [count, 3]."""
    if mesh.empty:
        raise SamplingError("cannot sample an empty mesh")
    areas = mesh.face_areas()
    total = areas.sum()
    if not total > 0:
        raise SamplingError("mesh has zero total area")
    rng = np.random.default_rng(seed)
    tri = rng.choice(len(areas), size=count, p=areas / total)
    u = rng.random((count, 2))
    flip = u.sum(axis=1) > 1
    u[flip] = 1 - u[flip]
    a, b, c = (mesh.vertices[mesh.faces[tri, k]] for k in range(3))
    return a + u[:, :1] * (b - a) + u[:, 1:] * (c - a)


def contour_sample(lines: list[np.ndarray], count: int, seed: int = 0) -> np.ndarray:
    """Length-weighted uniform points on 2D polylines, shape [count, 2]."""
    segs = [np.stack([ln[:-1], ln[1:]], axis=1) for ln in lines if len(ln) > 1]
    if not segs:
        raise SamplingError("no contour segments to sample")
    segs = np.concatenate(segs)
    lengths = np.linalg.norm(segs[:, 1] - segs[:, 0], axis=1)
    if not lengths.sum() > 0:
        raise SamplingError("contours have zero length")
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(segs), size=count, p=lengths / lengths.sum())
    t = rng.random((count, 1))
    return segs[pick, 0] + t * (segs[pick, 1] - segs[pick, 0])


def extract_surface_points(field, n: int, count: int, d: int = 3, level: float = 0.5, seed: int = 0):
    """Sample a field on an n-grid, extract its level set, return surface points."""
    grid = sample_grid(field, n, d)
    if grid.d == 3:
        return surface_sample(marching_cubes(grid, level), count, seed)
    return contour_sample(marching_squares(grid, level), count, seed)
