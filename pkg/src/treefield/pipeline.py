"""Corpus-level plumbing shared by the CLI and the acceptance suite."""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .inr import CheckpointFormatError, FitConfig, InrArch, InrCheckpoint, fit
from .isoextract import SamplingError, extract_surface_points, sample_grid
from .metrics import chamfer, skeleton_stats
from .treegen import TreeGraph, generate_tree, tree_stats, voxelize

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1

# stage codes for seed splitting; append only
STAGES = {"gen": 1, "fit": 2, "init": 3, "ddm": 4, "sample": 5, "eval": 6, "segment": 7}

# printed (#Params in millions, size in MB) for d=3, keyed by (D, L)
TABLE1_PRINTED = {
    (64, 1): (0.01, 0.03), (64, 3): (0.03, 0.10), (64, 5): (0.04, 0.16),
    (128, 1): (0.03, 0.13), (128, 3): (0.10, 0.38), (128, 5): (0.17, 0.63),
    (256, 1): (0.13, 0.51), (256, 3): (0.40, 1.51), (256, 5): (0.66, 2.51),
    (512, 1): (0.53, 2.01), (512, 3): (1.58, 6.02), (512, 5): (2.63, 10.03),
    (1024, 1): (2.10, 8.03), (1024, 3): (6.30, 24.04), (1024, 5): (10.50, 42.48),
}  # fmt: skip


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


def seed_for(master: int, stage: str, index: int = 0) -> int:
    """Per-item seed: master -> stage -> item, so adding items never reshuffles others."""
    ss = np.random.SeedSequence([int(master), STAGES[stage], int(index)])
    return int(ss.generate_state(1, np.uint32)[0])


def worker_count(n_items: int) -> int:
    raw = os.environ.get("TREEFIELD_THREADS")
    if raw is None:
        cap = os.cpu_count() or 1
    else:
        try:
            cap = int(raw)
        except ValueError:
            raise ConfigError(f"TREEFIELD_THREADS must be a positive integer, got {raw!r}") from None
        if cap < 1:
            raise ConfigError(f"TREEFIELD_THREADS must be a positive integer, got {raw!r}")
    return max(1, min(cap, n_items))


def parallel_map(fn, items, workers: int | None = None) -> list:
    """Order-preserving map; results never depend on the worker count."""
    items = list(items)
    workers = worker_count(len(items)) if workers is None else workers
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def parse_range(text: str) -> list[int]:
    """'1..4' or '2,5,7' or '3'."""
    try:
        if ".." in text:
            lo, hi = (int(x) for x in text.split(".."))
            if hi < lo:
                raise ValueError
            return list(range(lo, hi + 1))
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"bad range {text!r}; use forms like 1..4 or 2,5,7") from None


def parse_archs(text: str, d: int = 3) -> list[InrArch]:
    """'16,64x1,3' -> D in {16, 64} crossed with L in {1, 3}."""
    try:
        ds, ls = text.split("x")
        return [InrArch(d, int(D), int(L)) for D in ds.split(",") for L in ls.split(",")]
    except ValueError:
        raise ConfigError(f"bad arch list {text!r}; expected e.g. 16,64x1,3") from None


# corpus -------------------------------------------------------------------


def corpus_plan(n: int, bifurcations: list[int], master_seed: int) -> list[tuple[int, int]]:
    """(bifurcation count, tree seed) per item, cycling through the counts."""
    return [(bifurcations[i % len(bifurcations)], seed_for(master_seed, "gen", i)) for i in range(n)]


def generate_corpus(n: int, bifurcations: list[int], master_seed: int, d: int = 3, wiggle: float = 0.3):
    return [generate_tree(s, d, k, wiggle) for k, s in corpus_plan(n, bifurcations, master_seed)]


@dataclass
class ManifestItem:
    tree: str
    seed: int
    bifurcations: int
    stats: dict
    checkpoint: str | None = None
    fit_loss: float | None = None


@dataclass
class Manifest:
    items: list[ManifestItem]
    meta: dict = field(default_factory=dict)
    path: Path | None = None

    @property
    def root(self) -> Path:
        return self.path.parent if self.path else Path(".")

    def resolve(self, rel: str) -> Path:
        return self.root / rel

    def to_json(self) -> str:
        body = {
            "version": MANIFEST_VERSION,
            "meta": self.meta,
            "items": [vars(it) for it in self.items],
        }
        return json.dumps(body, indent=1, sort_keys=True) + "\n"

    def save(self, path=None) -> None:
        path = Path(path or self.path)
        path.write_text(self.to_json(), encoding="utf-8")
        self.path = path

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        if not path.exists():
            raise DataError(f"{path}: manifest not found (run gen-data first)")
        try:
            body = json.loads(path.read_text(encoding="utf-8"))
            items = [ManifestItem(**it) for it in body["items"]]
        except (ValueError, KeyError, TypeError) as exc:
            raise DataError(f"{path}: malformed manifest ({exc})") from None
        m = cls(items, body.get("meta", {}), path)
        m.validate()
        return m

    def validate(self, need_checkpoints: bool = False) -> None:
        for it in self.items:
            if not self.resolve(it.tree).exists():
                raise DataError(f"manifest references missing tree file {it.tree}")
            if it.checkpoint is not None:
                if not self.resolve(it.checkpoint).exists():
                    raise DataError(f"manifest references missing checkpoint {it.checkpoint}")
            elif need_checkpoints:
                raise DataError(f"{it.tree} has no checkpoint; run fit first")

    def trees(self) -> list[TreeGraph]:
        return [TreeGraph.load(self.resolve(it.tree)) for it in self.items]

    def checkpoints(self) -> list[InrCheckpoint]:
        self.validate(need_checkpoints=True)
        cks = [InrCheckpoint.load(self.resolve(it.checkpoint)) for it in self.items]
        if len({c.arch for c in cks}) > 1:
            raise DataError("checkpoints in one manifest must share one architecture")
        return cks


def stats_dict(tree: TreeGraph) -> dict:
    s = tree_stats(tree)
    return {
        "bifurcation_count": int(s.bifurcation_count),
        "total_length": round(float(s.total_length), 9),
        "average_radius": round(float(s.average_radius), 9),
        "mean_tortuosity": round(float(np.mean(s.tortuosity_per_branch)), 9),
    }


def write_corpus(out_dir, n: int, bifurcations: list[int], master_seed: int, d: int = 3, wiggle: float = 0.3) -> Manifest:
    out = Path(out_dir)
    (out / "trees").mkdir(parents=True, exist_ok=True)
    items = []
    for i, (k, s) in enumerate(corpus_plan(n, bifurcations, master_seed)):
        tree = generate_tree(s, d, k, wiggle)
        rel = f"trees/tree_{i:04d}.tree"
        tree.save(out / rel)
        items.append(ManifestItem(rel, s, k, stats_dict(tree)))
    meta = {"generator": {"n": n, "bifurcations": bifurcations, "seed": master_seed, "d": d, "wiggle": wiggle}}
    m = Manifest(items, meta, out / "manifest.json")
    m.save()
    return m


# fitting ------------------------------------------------------------------


def _fit_job(job):
    tree, arch, cfg, source = job
    return fit(tree, arch, cfg, source=source)


def fit_configs(n: int, cfg: FitConfig, master_seed: int) -> list[FitConfig]:
    """Per-item fit seeds, one init seed shared by the whole corpus."""
    init = cfg.init_seed if cfg.init_seed is not None else seed_for(master_seed, "init")
    return [replace(cfg, seed=seed_for(master_seed, "fit", i), init_seed=init) for i in range(n)]


def fit_trees(trees, arch: InrArch, cfg: FitConfig, master_seed: int = 0, workers: int | None = None, sources=None):
    cfgs = fit_configs(len(trees), cfg, master_seed)
    sources = sources or [f"tree_{i:04d}" for i in range(len(trees))]
    jobs = [(t, arch, c, s) for t, c, s in zip(trees, cfgs, sources)]
    return parallel_map(_fit_job, jobs, workers)


def _existing_checkpoint(path: Path, arch: InrArch) -> InrCheckpoint | None:
    if not path.exists():
        return None
    try:
        ck = InrCheckpoint.load(path)
    except CheckpointFormatError:
        return None
    return ck if ck.arch == arch else None


def fit_manifest(manifest: Manifest, arch: InrArch, cfg: FitConfig, master_seed: int, workers: int | None = None) -> int:
    """Fit every tree without a valid checkpoint; returns the number fitted."""
    (manifest.root / "checkpoints").mkdir(exist_ok=True)
    cfgs = fit_configs(len(manifest.items), cfg, master_seed)
    todo = []
    for i, it in enumerate(manifest.items):
        rel = f"checkpoints/{Path(it.tree).stem}.inr"
        ck = _existing_checkpoint(manifest.resolve(rel), arch)
        if ck is None:
            todo.append((i, rel))
        else:
            it.checkpoint, it.fit_loss = rel, ck.metadata.get("final_loss")
    jobs = [(TreeGraph.load(manifest.resolve(manifest.items[i].tree)), arch, cfgs[i], Path(rel).stem) for i, rel in todo]
    for (i, rel), ck in zip(todo, parallel_map(_fit_job, jobs, workers)):
        ck.save(manifest.resolve(rel))
        manifest.items[i].checkpoint = rel
        manifest.items[i].fit_loss = ck.metadata["final_loss"]
    manifest.meta["arch"] = [arch.d, arch.D, arch.L]
    manifest.meta["fit"] = {k: v for k, v in vars(cfg).items() if k != "seed"} | {"master_seed": master_seed}
    manifest.meta["fit"]["init_seed"] = cfgs[0].init_seed if cfgs else cfg.init_seed
    manifest.save()
    return len(todo)


# evaluation helpers ---------------------------------------------------------


def surface_points(field, res: int, count: int, seed: int, d: int = 3) -> np.ndarray:
    return extract_surface_points(field, res, count, d=d, seed=seed)


def fidelity_cd(tree: TreeGraph, ckpt: InrCheckpoint, res: int = 64, count: int = 8192, gt_res: int = 128, seed: int = 0) -> float:
    """Chamfer between INR extraction at ``res`` and the analytic surface at ``gt_res``.

    NaN when the INR has no surface at ``res``.
    """
    try:
        a = surface_points(ckpt, res, count, seed, tree.dim)
    except SamplingError:
        return float("nan")
    b = surface_points(tree, gt_res, count, seed + 1, tree.dim)
    return chamfer(a, b)


def occupancy_mse(tree: TreeGraph, ckpt: InrCheckpoint, count: int = 65536, seed: int = 0) -> float:
    """Held-out occupancy MSE on uniform points of the domain."""
    pts = np.random.default_rng(seed).uniform(-1, 1, (count, tree.dim)).astype(np.float32)
    return float(np.mean((ckpt(pts) - tree.occupancy(pts.astype(np.float64))) ** 2))


def field_skeleton(field, res: int, d: int = 3):
    grid = sample_grid(field, res, d)
    grid.values = (grid.values >= 0.5).astype(np.float32)
    return skeleton_stats(grid)


def tree_skeleton(tree: TreeGraph, res: int = 128):
    return skeleton_stats(voxelize(tree, res))


def table1_rows(archs) -> list[list]:
    rows = []
    for a in archs:
        size_mb = 4 * a.P / 2**20
        printed = TABLE1_PRINTED.get((a.D, a.L)) if a.d == 3 else None
        p_m, p_mb = printed if printed else ("", "")
        match = "" if not printed else int(abs(size_mb - p_mb) <= 0.05)
        rows.append([a.d, a.D, a.L, a.P, round(a.P / 1e6, 2), round(size_mb, 4), p_m, p_mb, match])
    return rows


TABLE1_HEADER = ["d", "D", "L", "params", "params_M", "size_MB", "printed_params_M", "printed_size_MB", "size_match"]
