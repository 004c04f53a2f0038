"""Procedural tubular trees on [-1, 1]^d with an exact occupancy oracle.

A tree is a set of nodes (position, radius) joined by parent->child
edges. Every edge is a tapered capsule: the union of balls centred on the
segment whose radius varies linearly between the end radii. The signed
distance of a point to one capsule is

    min_{t in [0, 1]} |x - p(t)| - r(t)

which is convex in ``t`` and has a closed-form minimiser, so occupancy is
exact and the distance is 1-Lipschitz.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .isoextract import VoxelGrid, cell_centers

ROOT_RADIUS = 0.08
TAPER = 0.8
SEGMENTS_PER_BRANCH = 6
MAX_RETRIES = 200


class GenerationError(RuntimeError):
    pass


class TreeFormatError(ValueError):
    pass


@dataclass
class TreeStats:
    bifurcation_count: int
    total_length: float
    tortuosity_per_branch: list[float]
    average_radius: float

    def as_dict(self) -> dict:
        return {
            "bifurcation_count": self.bifurcation_count,
            "total_length": self.total_length,
            "mean_tortuosity": float(np.mean(self.tortuosity_per_branch)) if self.tortuosity_per_branch else 1.0,
            "branch_count": len(self.tortuosity_per_branch),
            "average_radius": self.average_radius,
        }


@dataclass(eq=False)
class TreeGraph:
    positions: np.ndarray  # [n, d]
    radii: np.ndarray  # [n]
    edges: np.ndarray  # [m, 2] parent -> child
    root: int = 0
    _caps: tuple | None = field(default=None, repr=False, compare=False)
    _cull: tuple | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.radii = np.asarray(self.radii, dtype=np.float64)
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)

    @property
    def d(self) -> int:
        return self.positions.shape[1]

    @property
    def dim(self) -> int:
        return self.d

    def children(self) -> list[list[int]]:
        kids: list[list[int]] = [[] for _ in range(len(self.radii))]
        for p, c in self.edges:
            kids[p].append(int(c))
        return kids

    def validate(self) -> None:
        n = len(self.radii)
        if len(self.positions) != n or np.any(self.radii <= 0):
            raise TreeFormatError("node positions/radii inconsistent")
        if len(self.edges) != n - 1:
            raise TreeFormatError("a rooted tree needs exactly n-1 edges")
        parent = np.full(n, -1)
        for p, c in self.edges:
            if parent[c] != -1 or c == self.root:
                raise TreeFormatError(f"node {c} has more than one parent")
            parent[c] = p
            if self.radii[c] > self.radii[p] + 1e-12:
                raise TreeFormatError(f"edge {p}->{c} widens")
        seen = {self.root}
        stack = [self.root]
        kids = self.children()
        while stack:
            for c in kids[stack.pop()]:
                seen.add(c)
                stack.append(c)
        if len(seen) != n:
            raise TreeFormatError("tree is not connected")

    def inside_domain(self) -> bool:
        margin = self.radii.max()
        return bool(np.all(np.abs(self.positions) <= 1.0 - margin))

    # ------------------------------------------------------------ geometry

    def _capsules(self):
        if self._caps is None:
            a = self.positions[self.edges[:, 0]]
            b = self.positions[self.edges[:, 1]]
            ra = self.radii[self.edges[:, 0]]
            rb = self.radii[self.edges[:, 1]]
            self._caps = (a, b, ra, rb)
        return self._caps

    def _culling_grid(self, res: int = 24):
        """Per-cell candidate capsule lists.

        For x in cell c (half-diagonal h), any capsule with
        sd_e(c) > min_e' sd_e'(c) + 2h can never be the minimiser at x, so
        restricting the min to the remaining capsules is exact.
        """
        if self._cull is None:
            a, b, ra, rb = self._capsules()
            centers = cell_centers(res, self.d)
            half = 0.5 * (2.0 / res) * np.sqrt(self.d)
            sd = np.concatenate(
                [capsule_signed_distance(centers[s : s + 4096], a, b, ra, rb) for s in range(0, len(centers), 4096)]
            )
            keep = sd <= sd.min(axis=1, keepdims=True) + 2 * half + 1e-9
            counts = keep.sum(axis=1)
            order = np.argsort(~keep, axis=1, kind="stable")
            width = int(counts.max())
            lists = order[:, :width]
            # pad with each cell's first candidate; duplicates do not change a min
            pad = np.arange(width)[None, :] >= counts[:, None]
            lists = np.where(pad, lists[:, :1], lists)
            self._cull = (res, lists, counts)
        return self._cull

    def signed_distance(self, points: np.ndarray, chunk: int = 8192) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        a, b, ra, rb = self._capsules()
        if len(a) == 0:
            return np.linalg.norm(pts - self.positions[self.root], axis=1) - self.radii[self.root]
        out = np.empty(len(pts))
        inside = np.all(np.abs(pts) <= 1.0, axis=1)
        if len(a) > 8 and inside.sum() > 256:
            res, lists, counts = self._culling_grid()
            idx = np.clip(np.floor((pts[inside] + 1.0) * (res / 2.0)).astype(np.int64), 0, res - 1)
            cell = np.ravel_multi_index(tuple(idx.T), (res,) * self.d)
            sub = pts[inside]
            vals = np.empty(len(sub))
            k = counts[cell]
            for lo, hi in ((0, 4), (4, 8), (8, 16), (16, lists.shape[1])):
                sel = np.flatnonzero((k > lo) & (k <= hi))
                if len(sel) == 0:
                    continue
                cand = lists[cell[sel], :hi]
                for s in range(0, len(sel), chunk):
                    part = sel[s : s + chunk]
                    e = cand[s : s + chunk]
                    vals[part] = _capsule_sd_gathered(sub[part], a[e], b[e], ra[e], rb[e]).min(axis=1)
            out[inside] = vals
            rest = np.flatnonzero(~inside)
        else:
            rest = np.arange(len(pts))
        for s in range(0, len(rest), chunk):
            part = rest[s : s + chunk]
            out[part] = capsule_signed_distance(pts[part], a, b, ra, rb).min(axis=1)
        return out

    def occupancy(self, points: np.ndarray) -> np.ndarray:
        return (self.signed_distance(points) <= 0).astype(np.float32)

    def __call__(self, points):
        return self.occupancy(points)

    # ------------------------------------------------------------------ io

    def export_text(self) -> str:
        lines = [f"TREEGRAPH v1 d={self.d}"]
        for i, (pos, r) in enumerate(zip(self.positions, self.radii)):
            coords = " ".join(repr(float(c)) for c in pos)
            lines.append(f"node {i} {coords} {float(r)!r}")
        for p, c in self.edges:
            lines.append(f"edge {p} {c}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.export_text(), encoding="utf-8")

    @classmethod
    def parse(cls, text: str) -> "TreeGraph":
        lines = [ln.split() for ln in text.splitlines() if ln.strip()]
        if not lines or lines[0][:2] != ["TREEGRAPH", "v1"] or len(lines[0]) != 3:
            raise TreeFormatError("missing 'TREEGRAPH v1 d=<2|3>' header")
        try:
            d = int(lines[0][2].removeprefix("d="))
        except ValueError:
            raise TreeFormatError("bad dimension in header") from None
        if d not in (2, 3):
            raise TreeFormatError(f"unsupported dimension {d}")
        nodes, edges = {}, []
        for lineno, parts in enumerate(lines[1:], 2):
            try:
                if parts[0] == "node" and len(parts) == d + 3:
                    nodes[int(parts[1])] = ([float(x) for x in parts[2 : 2 + d]], float(parts[-1]))
                elif parts[0] == "edge" and len(parts) == 3:
                    edges.append((int(parts[1]), int(parts[2])))
                else:
                    raise ValueError
            except ValueError:
                raise TreeFormatError(f"line {lineno}: cannot parse {' '.join(parts)!r}") from None
        if sorted(nodes) != list(range(len(nodes))):
            raise TreeFormatError("node indices must be 0..n-1")
        pos = np.array([nodes[i][0] for i in range(len(nodes))]).reshape(-1, d)
        rad = np.array([nodes[i][1] for i in range(len(nodes))])
        children = {c for _, c in edges}
        roots = [i for i in range(len(nodes)) if i not in children]
        if len(roots) != 1:
            raise TreeFormatError("tree must have exactly one root")
        tree = cls(pos, rad, np.array(edges, dtype=np.int64).reshape(-1, 2), roots[0])
        tree.validate()
        return tree

    @classmethod
    def load(cls, path) -> "TreeGraph":
        return cls.parse(Path(path).read_text(encoding="utf-8"))


def capsule_signed_distance(pts, a, b, ra, rb) -> np.ndarray:
    """Signed distance of points [N, d] to tapered capsules [M, ...] -> [N, M]."""
    n = len(pts)
    return _capsule_sd_gathered(
        pts, np.broadcast_to(a, (n,) + a.shape), np.broadcast_to(b, (n,) + b.shape), ra[None], rb[None]
    )


def _capsule_sd_gathered(pts, a, b, ra, rb) -> np.ndarray:
    """Like capsule_signed_distance with per-point capsules a, b: [N, K, d]."""
    axis = b - a
    length = np.sqrt(np.einsum("nkd,nkd->nk", axis, axis))
    safe = np.where(length > 0, length, 1.0)
    rel = pts[:, None, :] - a
    u = np.einsum("nkd,nkd->nk", rel, axis) / safe
    rr = np.einsum("nkd,nkd->nk", rel, rel)
    q = np.sqrt(np.maximum(rr - u * u, 0.0))
    dr = rb - ra
    k = np.clip(dr / safe, -0.999999, 0.999999)
    t = np.clip((u + k * q / np.sqrt(1.0 - k * k)) / safe, 0.0, 1.0)
    ua = u - t * length
    dist = np.sqrt(ua * ua + q * q) - (ra + t * dr)
    # one end ball swallows the other: the closed form above does not apply
    swallowed = np.abs(dr) >= length
    if np.any(swallowed):
        da = np.sqrt(rr) - ra
        db = np.linalg.norm(pts[:, None, :] - b, axis=2) - rb
        dist = np.where(swallowed, np.minimum(da, db), dist)
    return dist


# ---------------------------------------------------------------- generation


def _rotate_2d(v: np.ndarray, angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([c * v[0] - s * v[1], s * v[0] + c * v[1]])


def _perpendicular(v: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random unit vector orthogonal to unit vector ``v`` (3D)."""
    while True:
        w = rng.normal(size=3)
        w -= w.dot(v) * v
        n = np.linalg.norm(w)
        if n > 1e-6:
            return w / n


def _deflect(direction: np.ndarray, angle: float, rng: np.random.Generator, side: np.ndarray | None = None):
    """Rotate ``direction`` by ``angle`` towards ``side`` (random if None)."""
    if len(direction) == 2:
        sign = 1.0 if side is None else float(side[0])
        return _rotate_2d(direction, sign * angle)
    axis = _perpendicular(direction, rng) if side is None else side
    out = np.cos(angle) * direction + np.sin(angle) * axis
    return out / np.linalg.norm(out)


@dataclass
class _Branch:
    nodes: list[int]
    direction: np.ndarray
    length: float
    radius: float
    depth: int


def _grow_branch(start, start_idx, direction, length, radius, depth, wiggle, rng, pos, rad, edges):
    """Append a polyline branch; returns the branch record."""
    step = length / SEGMENTS_PER_BRANCH
    max_turn = np.radians(25.0) * wiggle
    idx = [start_idx]
    p = np.array(start, dtype=np.float64)
    heading = direction.copy()
    for _ in range(SEGMENTS_PER_BRANCH):
        if wiggle > 0:
            heading = _deflect(heading, rng.uniform(-max_turn, max_turn), rng)
        p = p + step * heading
        pos.append(p.copy())
        rad.append(radius)
        edges.append((idx[-1], len(pos) - 1))
        idx.append(len(pos) - 1)
    return _Branch(idx, heading, length, radius, depth)


def _attempt(rng, d, target, wiggle):
    pos: list[np.ndarray] = []
    rad: list[float] = []
    edges: list[tuple[int, int]] = []
    start = np.zeros(d)
    start[1] = -0.8
    if d == 3:
        start[:1] = rng.uniform(-0.1, 0.1)
        start[2] = rng.uniform(-0.1, 0.1)
    else:
        start[0] = rng.uniform(-0.1, 0.1)
    up = np.zeros(d)
    up[1] = 1.0
    direction = _deflect(up, rng.uniform(0, np.radians(10)), rng)
    pos.append(start)
    rad.append(ROOT_RADIUS)
    root_len = rng.uniform(0.55, 0.7)
    leaves = [_grow_branch(start, 0, direction, root_len, ROOT_RADIUS, 0, wiggle, rng, pos, rad, edges)]
    for _ in range(target):
        # breadth-first growth keeps depth ~log2(target)
        shallow = min(b.depth for b in leaves)
        choices = [i for i, b in enumerate(leaves) if b.depth == shallow]
        parent = leaves.pop(choices[rng.integers(len(choices))])
        tip = parent.nodes[-1]
        child_r = parent.radius * TAPER
        if d == 2:
            sides = [np.array([1.0]), np.array([-1.0])]
        else:
            s = _perpendicular(parent.direction, rng)
            sides = [s, -s]
        for side in sides:
            angle = np.radians(rng.uniform(20.0, 60.0))
            heading = _deflect(parent.direction, angle, rng, side)
            length = parent.length * rng.uniform(0.65, 0.85)
            leaves.append(
                _grow_branch(pos[tip], tip, heading, length, child_r, parent.depth + 1, wiggle, rng, pos, rad, edges)
            )
    return TreeGraph(np.array(pos), np.array(rad), np.array(edges, dtype=np.int64), 0)


def generate_tree(seed: int, d: int = 3, target_bifurcations: int = 3, wiggle: float = 0.3) -> TreeGraph:
    """Random rooted tree with exactly ``target_bifurcations`` bifurcations.

    Deterministic per seed. Branch polylines have six segments; child radius
    is 0.8 x parent, root radius 0.08. Placements that leave the domain are
    redrawn up to a bounded number of times.
    """
    if target_bifurcations < 0:
        raise ValueError("target_bifurcations must be >= 0")
    if d not in (2, 3):
        raise ValueError("d must be 2 or 3")
    if not 0.0 <= wiggle <= 1.0:
        raise ValueError("wiggle must lie in [0, 1]")
    rng = np.random.default_rng([seed, d, target_bifurcations])
    for _ in range(MAX_RETRIES):
        tree = _attempt(rng, d, target_bifurcations, wiggle)
        if tree.inside_domain():
            return tree
    raise GenerationError(
        f"could not place a {target_bifurcations}-bifurcation tree inside the domain "
        f"after {MAX_RETRIES} attempts (seed={seed})"
    )


# ---------------------------------------------------------------- statistics


def branch_paths(tree: TreeGraph) -> list[list[int]]:
    """Node paths between topology-changing nodes (root, leaves, junctions)."""
    kids = tree.children()
    has_parent = np.zeros(len(tree.radii), dtype=bool)
    has_parent[tree.edges[:, 1]] = True
    degree = np.array([len(k) for k in kids]) + has_parent
    paths = []
    for s in range(len(kids)):
        if degree[s] == 2:
            continue
        for c in kids[s]:
            path = [s, c]
            while degree[path[-1]] == 2:
                path.append(kids[path[-1]][0])
            paths.append(path)
    return paths


def tree_stats(tree: TreeGraph) -> TreeStats:
    kids = tree.children()
    bif = sum(1 for k in kids if len(k) >= 2)
    seg = tree.positions[tree.edges[:, 1]] - tree.positions[tree.edges[:, 0]]
    total = float(np.linalg.norm(seg, axis=1).sum())
    tort = []
    for path in branch_paths(tree):
        p = tree.positions[path]
        arc = float(np.linalg.norm(np.diff(p, axis=0), axis=1).sum())
        chord = float(np.linalg.norm(p[-1] - p[0]))
        if chord > 0:
            tort.append(max(arc / chord, 1.0))
    return TreeStats(bif, total, tort, float(tree.radii.mean()))


def voxelize(tree, resolution: int) -> VoxelGrid:
    """Occupancy sampled at the n^d cell centers of the domain."""
    if resolution < 8:
        raise ValueError("resolution must be >= 8")
    d = tree.dim
    pts = cell_centers(resolution, d)
    occ = np.empty(len(pts), dtype=np.float32)
    for s in range(0, len(pts), 65536):
        occ[s : s + 65536] = tree.occupancy(pts[s : s + 65536])
    return VoxelGrid(occ.reshape((resolution,) * d))


def tube_tree(start, end, radius: float, segments: int = 4) -> TreeGraph:
    """Straight constant-radius tube, handy as a fixture."""
    start, end = np.asarray(start, float), np.asarray(end, float)
    t = np.linspace(0.0, 1.0, segments + 1)[:, None]
    pos = start + t * (end - start)
    edges = np.stack([np.arange(segments), np.arange(1, segments + 1)], axis=1)
    return TreeGraph(pos, np.full(segments + 1, radius), edges, 0)
