"""Evaluation: fidelity, compression, set metrics, weight space, vessel statistics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .inr import InrArch, InrCheckpoint, checkpoint_size_bytes
from .isoextract import VoxelGrid
from .thinning import thin


class MetricError(ValueError):
    pass


# ---------------------------------------------------------------- fidelity


def _nearest_sq(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared distance from each point of ``a`` to its nearest point in ``b``.

    The index finds the neighbour; the distance is recomputed from
    coordinates so it is bit-identical to a brute-force evaluation.
    """
    _, idx = cKDTree(b).query(a, k=1)
    diff = a - b[idx]
    return np.einsum("ij,ij->i", diff, diff)


def chamfer(a, b) -> float:
    """Symmetric mean of squared nearest-neighbour distances (not scaled)."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.size == 0 or b.size == 0:
        raise MetricError("chamfer distance of an empty point set")
    return float(_nearest_sq(a, b).mean() + _nearest_sq(b, a).mean())


def chamfer_brute(a, b) -> float:
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    diff = a[:, None, :] - b[None, :, :]
    d = np.einsum("ijk,ijk->ij", diff, diff)
    return float(d.min(axis=1).mean() + d.min(axis=0).mean())


def hausdorff(a, b) -> float:
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(np.sqrt(max(_nearest_sq(a, b).max(), _nearest_sq(b, a).max())))


def compression_ratio(input_bytes: int, ckpt) -> float:
    """Input size over INR weight size. ``ckpt`` is a checkpoint or an arch."""
    if input_bytes <= 0:
        raise MetricError("input size must be positive")
    arch = ckpt.arch if isinstance(ckpt, InrCheckpoint) else ckpt
    if not isinstance(arch, InrArch):
        raise TypeError("expected an InrCheckpoint or InrArch")
    return input_bytes / checkpoint_size_bytes(arch)


def relative_error(recon, gt) -> float:
    """100 * ||recon - gt||_1 / ||gt||_1."""
    recon = np.asarray(recon, dtype=np.float64).ravel()
    gt = np.asarray(gt, dtype=np.float64).ravel()
    if recon.shape != gt.shape:
        raise MetricError(f"length mismatch {recon.size} vs {gt.size}")
    norm = np.abs(gt).sum()
    if norm == 0:
        raise MetricError("ground truth has zero norm")
    return float(100.0 * np.abs(recon - gt).sum() / norm)


# ---------------------------------------------------------------- generative sets


@dataclass
class SetMetrics:
    mmd: float
    cov: float
    one_nna_pct: float


def set_metrics_from_distances(d_gr, d_gg, d_rr) -> SetMetrics:
    """MMD / COV / 1-NNA from precomputed distance blocks.

    ``d_gr`` is [G, R]. For 1-NNA the union is ordered gen first, then
    ref. An item never votes for itself nor for exact duplicates of
    itself (distance 0); ties go to the lower union index.
    """
    d_gr, d_gg, d_rr = (np.asarray(x, dtype=np.float64) for x in (d_gr, d_gg, d_rr))
    G, R = d_gr.shape
    if G == 0 or R == 0:
        raise MetricError("generative metrics need nonempty sets")
    mmd = float(d_gr.min(axis=0).mean())
    covered = np.unique(np.argmin(d_gr, axis=1))
    cov = len(covered) / R
    full = np.block([[d_gg, d_gr], [d_gr.T, d_rr]])
    labels = np.r_[np.zeros(G, bool), np.ones(R, bool)]
    n = G + R
    correct = 0
    for i in range(n):
        row = full[i].copy()
        excluded = row <= 0.0
        excluded[i] = True
        if excluded.all():
            excluded = np.zeros(n, bool)
            excluded[i] = True
        if excluded.all():
            continue  # a single item has no neighbour
        row[excluded] = np.inf
        j = int(np.argmin(row))
        correct += labels[j] == labels[i]
    return SetMetrics(mmd, cov, 100.0 * correct / n)


def pairwise(items_a, items_b, dist: Callable) -> np.ndarray:
    return np.array([[dist(a, b) for b in items_b] for a in items_a], dtype=np.float64).reshape(
        len(items_a), len(items_b)
    )


def generative_set_metrics(gen: Sequence, ref: Sequence, dist: Callable = chamfer) -> SetMetrics:
    if not len(gen) or not len(ref):
        raise MetricError("generative metrics need nonempty sets")
    return set_metrics_from_distances(pairwise(gen, ref, dist), pairwise(gen, gen, dist), pairwise(ref, ref, dist))


def weight_rms(a, b) -> float:
    """RMS coordinate difference, i.e. ||a - b|| / sqrt(P)."""
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(np.sqrt(np.mean((a - b) ** 2)))


# ---------------------------------------------------------------- weight space


def weight_distance_matrix(groups: Mapping[int, Sequence[InrCheckpoint]]) -> tuple[list[int], np.ndarray]:
    """Mean L2 distance between the weight vectors of every pair of groups.

    Self-pairs are left out of diagonal cells.
    """
    keys = sorted(groups)
    archs = {c.arch for k in keys for c in groups[k]}
    if len(archs) > 1:
        raise MetricError(f"mixed architectures: {sorted(a.label() for a in archs)}")
    stacks = [np.stack([c.theta.astype(np.float64) for c in groups[k]]) for k in keys]
    n = len(keys)
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i, n):
            a, b = stacks[i], stacks[j]
            sq = (a * a).sum(1)[:, None] + (b * b).sum(1)[None] - 2 * a @ b.T
            d = np.sqrt(np.maximum(sq, 0.0))
            if i == j:
                if len(a) < 2:
                    out[i, i] = 0.0
                    continue
                d = d[~np.eye(len(a), dtype=bool)]
            out[i, j] = out[j, i] = float(d.mean())
    return keys, out


# ---------------------------------------------------------------- vessel statistics

_CUBE = np.ones((3, 3, 3), dtype=bool)


@dataclass
class SkeletonStats:
    junction_count: int
    branch_count: int
    total_length: float
    tortuosity_per_branch: list[float]
    average_radius: float
    skeleton_voxels: int = 0
    branch_lengths: list[float] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "junction_count": self.junction_count,
            "branch_count": self.branch_count,
            "total_length": self.total_length,
            "mean_tortuosity": float(np.mean(self.tortuosity_per_branch)) if self.tortuosity_per_branch else 1.0,
            "average_radius": self.average_radius,
        }


def _order_path(coords: np.ndarray) -> np.ndarray:
    """Order the voxels of a simple 26-connected path from one end to the other."""
    if len(coords) <= 2:
        return coords
    key = {tuple(c): i for i, c in enumerate(coords)}
    offsets = [o for o in np.ndindex(3, 3, 3) if o != (1, 1, 1)]
    nbrs = []
    for c in coords:
        nbrs.append([key[t] for o in offsets if (t := (c[0] + o[0] - 1, c[1] + o[1] - 1, c[2] + o[2] - 1)) in key])
    ends = [i for i, n in enumerate(nbrs) if len(n) <= 1]
    start = ends[0] if ends else 0
    order, seen = [start], {start}
    cur = start
    while True:
        # prefer face, then edge, then corner neighbours so small clumps are walked in order
        cand = [j for j in nbrs[cur] if j not in seen]
        if not cand:
            break
        cand.sort(key=lambda j: np.abs(coords[j] - coords[cur]).sum())
        cur = cand[0]
        order.append(cur)
        seen.add(cur)
    if len(order) < len(coords):
        # stray voxels in a thick clump; append them in a nearest-neighbour sweep
        rest = [i for i in range(len(coords)) if i not in seen]
        for i in sorted(rest, key=lambda i: np.linalg.norm(coords[i] - coords[order[-1]])):
            order.append(i)
    return coords[order]


def _smoothed_length(path: np.ndarray, window: int) -> float:
    if len(path) < 2:
        return 0.0
    p = path.astype(np.float64)
    if window > 1 and len(p) > window:
        kernel = np.ones(window) / window
        inner = np.stack([np.convolve(p[:, k], kernel, mode="valid") for k in range(p.shape[1])], axis=1)
        p = np.concatenate([p[:1], inner, p[-1:]])
    return float(np.linalg.norm(np.diff(p, axis=0), axis=1).sum())


def _branches(skel: np.ndarray):
    """Split a skeleton into branches at junction voxels (26-degree >= 3).

    Returns (paths, terminal, n_junctions). Each path is an ordered voxel
    list with the adjacent junction voxel, if any, attached at each end;
    ``terminal`` marks branches with a free end.
    """
    deg = ndimage.convolve(skel.astype(np.int32), _CUBE.astype(np.int32), mode="constant") - 1
    deg[~skel] = 0
    junction = skel & (deg >= 3)
    jlab, n_junctions = ndimage.label(junction, structure=_CUBE)
    blab, n_branches = ndimage.label(skel & ~junction, structure=_CUBE)
    near_j = ndimage.maximum_filter(jlab, footprint=_CUBE, mode="constant")
    paths, terminal = [], []
    for b, sl in enumerate(ndimage.find_objects(blab), start=1):
        coords = np.argwhere(blab[sl] == b) + np.array([s.start for s in sl])
        path = _order_path(coords)
        attached = []
        for end in (path[0], path[-1]):
            lab = near_j[tuple(end)]
            if lab:
                jc = np.argwhere(jlab[tuple(slice(max(c - 1, 0), c + 2) for c in end)] == lab)
                jc = jc + np.maximum(end - 1, 0)
                attached.append(jc[np.argmin(np.abs(jc - end).sum(1))])
            else:
                attached.append(None)
        if len(path) == 1 and attached[0] is not None and attached[1] is not None:
            attached[1] = None if np.array_equal(attached[0], attached[1]) else attached[1]
        if attached[0] is not None:
            path = np.concatenate([attached[0][None], path])
        if attached[1] is not None:
            path = np.concatenate([path, attached[1][None]])
        paths.append(path)
        terminal.append(attached[0] is None or attached[1] is None)
    return paths, terminal, n_junctions


def prune_spurs(skel: np.ndarray, edt: np.ndarray, factor: float = 1.2, slack: float = 1.5, rounds: int = 10):
    """Remove short terminal branches left by surface bumps.

    A terminal branch is a spur when its voxel arc length is at most
    ``factor * r + slack`` voxels, where ``r`` is the distance-transform
    radius at its junction end: such a branch cannot leave the tube.
    """
    skel = skel.copy()
    for _ in range(rounds):
        paths, terminal, n_j = _branches(skel)
        if n_j == 0:
            break
        removed = False
        for path, term in zip(paths, terminal):
            if not term or len(paths) <= 1:
                continue
            arc = float(np.linalg.norm(np.diff(path, axis=0), axis=1).sum())
            # the junction end is the one with the larger radius
            r = max(edt[tuple(path[0])], edt[tuple(path[-1])])
            if arc <= factor * r + slack:
                inner = path[1:-1] if len(path) > 2 else path[:0]
                free_end = path[-1] if edt[tuple(path[-1])] < edt[tuple(path[0])] else path[0]
                for v in list(inner) + [free_end]:
                    skel[tuple(v)] = False
                removed = True
        if not removed:
            break
    return skel


def skeleton_stats(grid: VoxelGrid, smooth: int = 3, prune: bool = True) -> SkeletonStats:
    """Vessel statistics from a binary 3D grid via 26-connected thinning.

    Branches are skeleton runs between junction clusters and end points.
    Lengths are in domain units; ``smooth`` is a moving-average window
    applied to the voxel path before measuring arc length, which removes
    most of the staircase excess of digital curves.
    """
    vol = np.asarray(grid.values) > 0.5
    if vol.ndim != 3:
        raise MetricError("skeleton_stats needs a 3D grid")
    if not vol.any():
        raise MetricError("empty foreground")
    h = grid.spacing
    edt = ndimage.distance_transform_edt(vol)
    skel = thin(vol)
    if prune:
        skel = prune_spurs(skel, edt)
    paths, _, n_junctions = _branches(skel)
    lengths, tort = [], []
    for path in paths:
        arc = _smoothed_length(path, smooth) * h
        chord = float(np.linalg.norm(path[-1] - path[0])) * h
        lengths.append(arc)
        if chord > 0 and arc > 0:
            tort.append(max(arc / chord, 1.0))
    radius = float(edt[skel].mean() * h) if skel.any() else 0.0
    return SkeletonStats(
        junction_count=int(n_junctions),
        branch_count=len(paths),
        total_length=float(np.sum(lengths)) if lengths else 0.0,
        tortuosity_per_branch=tort,
        average_radius=radius,
        skeleton_voxels=int(skel.sum()),
        branch_lengths=lengths,
    )


def component_count(vol: np.ndarray) -> int:
    return int(ndimage.label(np.asarray(vol) > 0.5, structure=_CUBE)[1])


# ---------------------------------------------------------------- histograms


def histogram(values, bins) -> tuple[np.ndarray, np.ndarray]:
    counts, edges = np.histogram(np.asarray(values, dtype=np.float64), bins=bins)
    return 0.5 * (edges[:-1] + edges[1:]), counts


def histogram_intersection(a, b, bins: int = 10, range_: tuple[float, float] | None = None) -> float:
    """Sum of bin-wise minima of the two normalized histograms, in [0, 1]."""
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    if a.size == 0 or b.size == 0:
        raise MetricError("histogram of an empty sample")
    if range_ is None:
        both = np.concatenate([a, b])
        range_ = (float(both.min()), float(both.max()))
        if range_[0] == range_[1]:
            return 1.0
    ha, edges = np.histogram(a, bins=bins, range=range_)
    hb, _ = np.histogram(b, bins=edges)
    return float(np.minimum(ha / a.size, hb / b.size).sum())


def write_histogram_csv(path, values, bins) -> None:
    centers, counts = histogram(values, bins)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_center", "count"])
        for c, n in zip(centers, counts):
            w.writerow([f"{c:.6g}", int(n)])


# ---------------------------------------------------------------- reports


@dataclass
class MetricsReport:
    values: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def validate(self) -> None:
        v = self.values
        if "cov" in v and not 0.0 <= v["cov"] <= 1.0:
            raise MetricError(f"cov out of range: {v['cov']}")
        if "one_nna_pct" in v and not 0.0 <= v["one_nna_pct"] <= 100.0:
            raise MetricError(f"1-NNA out of range: {v['one_nna_pct']}")
        if "compression_ratio" in v and not v["compression_ratio"] > 0:
            raise MetricError("compression ratio must be positive")
        for k, x in v.items():
            if isinstance(x, float) and not math.isfinite(x):
                raise MetricError(f"{k} is not finite")

    def write_csv(self, path) -> None:
        self.validate()
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["key", "value"])
            for k in sorted(self.values):
                w.writerow([k, _fmt(self.values[k])])
            for k in sorted(self.provenance):
                w.writerow([f"meta.{k}", _fmt(self.provenance[k])])


def _fmt(x) -> str:
    if isinstance(x, float):
        return f"{x:.6g}"
    return str(x)


def write_table(path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(list(header))
        for r in rows:
            w.writerow([_fmt(x) for x in r])
