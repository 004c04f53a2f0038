"""Segmentation by thresholding an intensity INR while it trains.

An INR is fit to image intensities; thresholding it at ``tau`` gives a
piecewise-constant version whose mask sharpens as the fit improves.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .inr import FitConfig, InrArch, InrCheckpoint, train_loop
from .isoextract import VoxelGrid, cell_centers, sample_grid
from .treegen import generate_tree, voxelize


@dataclass
class ImageField:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim not in (2, 3) or len(set(v.shape)) != 1:
            raise ValueError(f"image must be n^2 or n^3, got shape {v.shape}")
        if not np.all(np.isfinite(v)) or v.min() < 0 or v.max() > 1:
            raise ValueError("image values must lie in [0, 1]")
        self.values = v

    @property
    def d(self) -> int:
        return self.values.ndim

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def coords(self) -> np.ndarray:
        return cell_centers(self.n, self.d).astype(np.float32)


@dataclass
class Fixture:
    image: ImageField  # what the INR sees
    clean: np.ndarray  # blurred, noise-free signal
    mask: np.ndarray  # generator ground truth
    meta: dict = field(default_factory=dict)


def synthetic_vessel_image(
    seed: int = 0,
    n: int = 64,
    bifurcations: int = 3,
    fg: float = 0.9,
    bg: float = 0.1,
    blur_px: float = 1.0,
    noise: float = 0.02,
) -> Fixture:
    tree = generate_tree(seed, 2, bifurcations)
    mask = voxelize(tree, n).values > 0.5
    clean = ndimage.gaussian_filter(np.where(mask, fg, bg).astype(np.float64), blur_px, mode="nearest")
    rng = np.random.default_rng([seed, 7])
    noisy = np.clip(clean + rng.normal(0.0, noise, clean.shape), 0.0, 1.0)
    meta = {"seed": seed, "n": n, "bifurcations": bifurcations, "blur_px": blur_px, "noise": noise}
    return Fixture(ImageField(noisy), clean.astype(np.float32), mask, meta)


def threshold_mask(ckpt, resolution: int, tau: float = 0.5) -> VoxelGrid:
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must lie in (0, 1)")
    g = sample_grid(ckpt, resolution, ckpt.d)
    return VoxelGrid((g.values >= tau).astype(np.float32))


def dice(a, b) -> float:
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    total = a.sum() + b.sum()
    return 1.0 if total == 0 else float(2.0 * np.logical_and(a, b).sum() / total)


@dataclass
class Snapshot:
    iteration: int
    mask: np.ndarray


def fit_image(
    img: ImageField,
    arch: InrArch,
    cfg: FitConfig | None = None,
    snapshot_every: int = 100,
    tau: float = 0.5,
) -> tuple[InrCheckpoint, list[Snapshot]]:
    """Fit on uniformly drawn pixels; threshold the full grid every ``snapshot_every`` iterations."""
    cfg = cfg or FitConfig()
    if arch.d != img.d:
        raise ValueError(f"architecture is {arch.d}D but image is {img.d}D")
    coords = img.coords()
    target = img.values.ravel()
    snaps: list[Snapshot] = []

    def draw(rng):
        idx = rng.integers(len(coords), size=cfg.batch)
        return coords[idx], target[idx]

    def snap(it, layers):
        if it % snapshot_every == 0 or it == cfg.max_iters:
            ck = InrCheckpoint(arch, np.concatenate([a.ravel() for a in layers]))
            snaps.append(Snapshot(it, ck.forward(coords).reshape(img.values.shape) >= tau))

    ck = train_loop(arch, cfg, draw, snap, source="image")
    if not snaps or snaps[-1].iteration != ck.metadata["iterations"]:
        snaps.append(Snapshot(ck.metadata["iterations"], ck.forward(coords).reshape(img.values.shape) >= tau))
    return ck, snaps


def reconstruct(ckpt, img: ImageField) -> np.ndarray:
    return ckpt.forward(img.coords()).reshape(img.values.shape)


def tau_sweep(ckpt, resolution: int, taus) -> list[tuple[float, float]]:
    """Foreground fraction of the thresholded field per tau."""
    g = sample_grid(ckpt, resolution, ckpt.d).values
    return [(float(t), float(np.mean(g >= t))) for t in taus]


def write_pgm(path, values) -> None:
    """8-bit binary PGM of a 2D array in [0, 1]."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 2:
        raise ValueError("PGM export needs a 2D array")
    px = np.round(np.clip(v, 0.0, 1.0) * 255).astype(np.uint8)
    h, w = px.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + px.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P5" or parts[3] != b"255":
        raise ValueError(f"{path}: not an 8-bit P5 PGM")
    w, h = int(parts[1]), int(parts[2])
    data = parts[4]
    if len(data) != w * h:
        raise ValueError(f"{path}: expected {w * h} pixel bytes, found {len(data)}")
    return np.frombuffer(data, np.uint8).reshape(h, w) / 255.0
