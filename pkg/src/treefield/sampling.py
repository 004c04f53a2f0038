"""Supervision point sets for occupancy fitting.

An oracle is any object with ``dim``, ``signed_distance(points)`` and
``occupancy(points)``. ``occupancy`` must equal ``signed_distance <= 0``.

Near-surface points are uniform over the band ``|sd| <= band``. They are
drawn by rejection, but candidates come from the coarse cells that can
intersect the band rather than all of the domain. Because the candidate
region covers the whole band and the proposal is uniform on it, accepted
points have exactly the distribution of rejection from uniform on the
domain, at a far higher acceptance rate.
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass

import numpy as np

from .isoextract import cell_centers


@dataclass
class SampleBatch:
    points: np.ndarray  # [M, d] float32
    occupancies: np.ndarray  # [M] float32
    n_surface: int = 0

    def __len__(self):
        return len(self.points)


class Ball:
    """Analytic ball oracle, mostly for tests and smoke runs."""

    def __init__(self, radius: float = 0.5, center=None, dim: int = 3):
        self.radius = radius
        self.dim = dim
        self.center = np.zeros(dim) if center is None else np.asarray(center, float)

    def signed_distance(self, points):
        return np.linalg.norm(np.atleast_2d(points) - self.center, axis=1) - self.radius

    def occupancy(self, points):
        return (self.signed_distance(points) <= 0).astype(np.float32)

    def __call__(self, points):
        return self.occupancy(points)


class Constant:
    """Oracle with the same occupancy everywhere."""

    def __init__(self, value: float = 0.0, dim: int = 3):
        self.value = float(value)
        self.dim = dim

    def signed_distance(self, points):
        n = len(np.atleast_2d(points))
        return np.full(n, -10.0 if self.value > 0.5 else 10.0)

    def occupancy(self, points):
        return np.full(len(np.atleast_2d(points)), self.value, dtype=np.float32)


def oracle_dim(oracle) -> int:
    return int(getattr(oracle, "dim", getattr(oracle, "d", 3)))


class PointSampler:
    """Reusable sampler bound to one oracle.

    ``proposal_res`` sets the coarse cell grid used to restrict surface
    candidates and to shortcut occupancy of points far from the surface.
    The shortcut relies on ``sd`` being Lipschitz with constant 1 up to an
    additive ``oracle.sd_slack`` (0 for analytic shapes).
    """

    def __init__(self, oracle, band: float = 0.05, proposal_res: int | None = None):
        if band <= 0:
            raise ValueError("band must be positive")
        self.oracle = oracle
        self.d = oracle_dim(oracle)
        self.band = band
        if proposal_res is None:
            proposal_res = 32 if self.d == 3 else 128
        self.g = proposal_res
        self.cell = 2.0 / proposal_res
        half_diag = 0.5 * self.cell * np.sqrt(self.d)
        self.reach = half_diag + float(getattr(oracle, "sd_slack", 0.0))
        sd = np.asarray(oracle.signed_distance(cell_centers(proposal_res, self.d)), dtype=np.float64)
        self.coarse_sd = sd
        self.band_cells = np.flatnonzero(np.abs(sd) <= band + self.reach)
        # cells whose sign is decided without evaluating the oracle
        self.sure = np.abs(sd) > self.reach

    def _cell_of(self, pts):
        idx = np.clip(np.floor((pts + 1.0) / self.cell).astype(np.int64), 0, self.g - 1)
        return np.ravel_multi_index(tuple(idx.T), (self.g,) * self.d)

    def occupancy(self, pts: np.ndarray) -> np.ndarray:
        cells = self._cell_of(pts)
        occ = (self.coarse_sd[cells] <= 0).astype(np.float32)
        unsure = ~self.sure[cells]
        if np.any(unsure):
            occ[unsure] = self.oracle.occupancy(pts[unsure])
        return occ

    def _band_candidates(self, count: int, rng: np.random.Generator) -> np.ndarray:
        cells = self.band_cells[rng.integers(len(self.band_cells), size=count)]
        lo = np.stack(np.unravel_index(cells, (self.g,) * self.d), axis=1) * self.cell - 1.0
        # labels are computed on the float32 points the network will see
        return (lo + rng.random((count, self.d)) * self.cell).astype(np.float32)

    def draw(self, M: int, surface_fraction: float, rng: np.random.Generator) -> SampleBatch:
        if M < 1:
            raise ValueError("M must be >= 1")
        if not 0.0 <= surface_fraction <= 1.0:
            raise ValueError("surface_fraction must lie in [0, 1]")
        want = int(np.floor(surface_fraction * M))
        chunks, got, rejected = [], 0, 0
        limit = 10 * M
        while got < want and rejected <= limit and len(self.band_cells):
            batch = max(2 * (want - got), 64)
            cand = self._band_candidates(batch, rng)
            sd = self.oracle.signed_distance(cand.astype(np.float64))
            keep = np.abs(sd) <= self.band
            rejected += int((~keep).sum())
            acc = cand[keep][: want - got]
            chunks.append((acc, (sd[keep][: want - got] <= 0).astype(np.float32)))
            got += len(acc)
        # surface slots left over after the rejection budget fall back to uniform
        n_uniform = M - got
        uni = rng.uniform(-1.0, 1.0, (n_uniform, self.d)).astype(np.float32)
        pts = np.concatenate([c[0] for c in chunks] + [uni]) if chunks else uni
        occ_parts = [c[1] for c in chunks] + [self.occupancy(uni.astype(np.float64))]
        occ = np.concatenate(occ_parts)
        return SampleBatch(pts.astype(np.float32), occ.astype(np.float32), got)


_SAMPLERS: "weakref.WeakKeyDictionary" = weakref.WeakKeyDictionary()


def sampler_for(oracle, band: float) -> PointSampler:
    try:
        cached = _SAMPLERS.get(oracle)
    except TypeError:
        return PointSampler(oracle, band)
    if cached is None or cached.band != band:
        cached = PointSampler(oracle, band)
        _SAMPLERS[oracle] = cached
    return cached


def sample_points(oracle, M: int, surface_fraction: float = 0.5, band: float = 0.05, seed: int = 0) -> SampleBatch:
    """``floor(surface_fraction * M)`` near-surface points, the rest uniform on the domain."""
    rng = np.random.default_rng(seed)
    return sampler_for(oracle, band).draw(M, surface_fraction, rng)
