"""Explicit voxel shapes as fitting oracles.

A binary grid becomes an oracle with the same interface as a generated
tree. Signed distance at a cell center is the distance to the nearest
cell center of the other class::

    sd = dist_to_fg      outside
    sd = -dist_to_bg     inside

Off-center queries interpolate the cell values linearly, so the zero
level sits on the faces between inside and outside cells and
``occupancy == (sd <= 0)`` holds by construction. Grid distances are
exact only at cell centers; ``sd_slack`` bounds the discretization error
for the sampler.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy import ndimage

from .isoextract import VOX_MAGIC, GridFormatError, VoxelGrid

FAR = 10.0  # larger than any distance inside the domain


class IngestionError(ValueError):
    pass


def euclidean_distance_to(mask: np.ndarray, spacing: float = 1.0) -> np.ndarray:
    """Distance from every cell center to the nearest True cell center."""
    mask = np.asarray(mask, bool)
    if not mask.any():
        return np.full(mask.shape, np.inf)
    return ndimage.distance_transform_edt(~mask, sampling=spacing)


def signed_distance_grid(binary: np.ndarray, spacing: float) -> np.ndarray:
    fg = np.asarray(binary, bool)
    if not fg.any():
        return np.full(fg.shape, FAR)
    if fg.all():
        return np.full(fg.shape, -FAR)
    return np.where(fg, -euclidean_distance_to(~fg, spacing), euclidean_distance_to(fg, spacing))


class VoxelOracle:
    def __init__(self, grid: VoxelGrid, threshold: float = 0.5):
        self.grid = VoxelGrid((grid.values >= threshold).astype(np.float32))
        self.dim = grid.d
        self.threshold = threshold
        self.sd_grid = signed_distance_grid(self.grid.values > 0.5, grid.spacing)
        self.sd_slack = float(np.sqrt(self.dim) * grid.spacing)

    def signed_distance(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        # continuous index: cell i has center -1 + (i + 0.5) h
        idx = (pts + 1.0) / self.grid.spacing - 0.5
        return ndimage.map_coordinates(self.sd_grid, idx.T, order=1, mode="nearest")

    def occupancy(self, points) -> np.ndarray:
        return (self.signed_distance(points) <= 0).astype(np.float32)

    def __call__(self, points):
        return self.occupancy(points)


def read_volume(path, dims=None) -> VoxelGrid:
    """``VOX1`` grid, or raw little-endian float32 when ``dims`` is given."""
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"{path}: no such file")
    raw = path.read_bytes()
    if raw[:4] == VOX_MAGIC:
        try:
            return VoxelGrid.load(path)
        except GridFormatError as exc:
            raise IngestionError(str(exc)) from None
    if dims is None:
        raise IngestionError(f"{path}: not a VOX1 grid; pass dims for raw volumes")
    dims = tuple(int(x) for x in dims)
    if len(dims) not in (2, 3) or len(set(dims)) != 1:
        raise IngestionError(f"raw volume dims must be n x n or n x n x n, got {dims}")
    expected = 4 * int(np.prod(dims))
    if len(raw) != expected:
        raise IngestionError(f"{path}: size mismatch, {len(raw)} bytes for dims {dims} (expected {expected})")
    values = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
    if not np.all(np.isfinite(values)):
        raise IngestionError(f"{path}: non-finite values")
    return VoxelGrid(values)


def load_voxel_volume(path, threshold: float = 0.5, dims=None) -> tuple[VoxelGrid, VoxelOracle]:
    oracle = VoxelOracle(read_volume(path, dims), threshold)
    return oracle.grid, oracle
