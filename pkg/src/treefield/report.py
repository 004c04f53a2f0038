"""Summary table and figures from the CSV outputs of earlier commands."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import write_table  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 120,
    "savefig.bbox": "tight",
}


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def _num(x):
    try:
        return float(x)
    except ValueError:
        return np.nan


def _save(fig, path: Path, made: list) -> None:
    fig.savefig(path)
    plt.close(fig)
    made.append(path)


def _label(path: Path, root: Path) -> str:
    rel = path.parent.relative_to(root)
    return str(rel) if str(rel) != "." else "."


def plot_table1(path: Path, out: Path, made: list) -> None:
    header, rows = read_csv(path)
    col = {h: i for i, h in enumerate(header)}
    fig, ax = plt.subplots(figsize=(4.5, 3))
    for L in sorted({int(r[col["L"]]) for r in rows}):
        sel = sorted((r for r in rows if int(r[col["L"]]) == L), key=lambda r: int(r[col["D"]]))
        D = [int(r[col["D"]]) for r in sel]
        ax.plot(D, [_num(r[col["size_MB"]]) for r in sel], "o-", label=f"L={L} computed")
        printed = [_num(r[col["printed_size_MB"]]) for r in sel]
        if not np.all(np.isnan(printed)):
            ax.plot(D, printed, "x", color="k", ms=6)
    ax.set_xscale("log", base=2)
    ax.set_yscale("log")
    ax.set_xlabel("hidden size D")
    ax.set_ylabel("checkpoint size (MB)")
    ax.set_title("INR size (x: printed values)")
    ax.legend()
    _save(fig, out / "table1_size.png", made)


def plot_fidelity(path: Path, out: Path, made: list, tag: str) -> None:
    header, rows = read_csv(path)
    col = {h: i for i, h in enumerate(header)}
    bif = np.array([_num(r[col["bifurcations"]]) for r in rows])
    cd = np.array([_num(r[col["cd_e3"]]) for r in rows])
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.scatter(bif, cd, s=14)
    ax.set_xlabel("bifurcations")
    ax.set_ylabel("CD x 1e3")
    ax.set_title(f"reconstruction fidelity ({tag})")
    _save(fig, out / f"fidelity_{tag.replace('/', '_')}.png", made)


def plot_weight_matrix(path: Path, out: Path, made: list, tag: str) -> None:
    header, rows = read_csv(path)
    keys = header[1:]
    mat = np.array([[_num(x) for x in r[1:]] for r in rows])
    fig, ax = plt.subplots(figsize=(4, 3.5))
    im = ax.imshow(mat, cmap="viridis")
    ax.set_xticks(range(len(keys)), keys)
    ax.set_yticks(range(len(keys)), keys)
    ax.set_xlabel("bifurcations")
    ax.set_ylabel("bifurcations")
    ax.set_title("mean weight distance")
    fig.colorbar(im, ax=ax, shrink=0.8)
    _save(fig, out / f"weight_distance_{tag.replace('/', '_')}.png", made)


def plot_histograms(folder: Path, out: Path, made: list, tag: str) -> None:
    names = sorted({p.stem.split("_", 2)[2] for p in folder.glob("hist_*_*.csv")})
    if not names:
        return
    fig, axes = plt.subplots(1, len(names), figsize=(3.2 * len(names), 2.8), squeeze=False)
    for ax, name in zip(axes[0], names):
        for which, color in (("train", "C0"), ("gen", "C1")):
            p = folder / f"hist_{which}_{name}.csv"
            if not p.exists():
                continue
            _, rows = read_csv(p)
            c = np.array([_num(r[0]) for r in rows])
            n = np.array([_num(r[1]) for r in rows])
            w = np.diff(c).min() if len(c) > 1 else 1.0
            ax.bar(c, n / max(n.sum(), 1), width=0.9 * w, alpha=0.5, color=color, label=which)
        ax.set_xlabel(name.replace("_", " "))
        ax.set_ylabel("fraction")
        ax.legend()
    _save(fig, out / f"histograms_{tag.replace('/', '_')}.png", made)


def plot_loss(path: Path, out: Path, made: list) -> None:
    _, rows = read_csv(path)
    loss = np.array([_num(r[1]) for r in rows])
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.semilogy(loss, lw=0.8)
    ax.set_xlabel("epoch")
    ax.set_ylabel("denoiser loss")
    _save(fig, out / f"{path.stem.replace('.', '_')}.png", made)


def plot_segmentation(folder: Path, out: Path, made: list, tag: str) -> None:
    from .segmentation import read_pgm

    _, rows = read_csv(folder / "snapshots.csv")
    it = [int(r[0]) for r in rows]
    dc = [_num(r[1]) for r in rows]
    masks = sorted(folder.glob("mask_*.pgm"))
    panels = [folder / "image.pgm"] + masks[:: max(1, len(masks) // 4)][:4] + [folder / "ground_truth.pgm"]
    panels = [p for p in panels if p.exists()]
    fig, axes = plt.subplots(1, len(panels) + 1, figsize=(2.2 * (len(panels) + 1), 2.4))
    for ax, p in zip(axes, panels):
        ax.imshow(read_pgm(p), cmap="gray", vmin=0, vmax=1, origin="lower")
        ax.set_title(p.stem.replace("_", " "))
        ax.axis("off")
    axes[-1].plot(it, dc, "o-", ms=3)
    axes[-1].set_xlabel("iteration")
    axes[-1].set_ylabel("Dice")
    _save(fig, out / f"segmentation_{tag.replace('/', '_')}.png", made)


def build_report(root: Path, out: Path) -> list[Path]:
    """Aggregate every ``metrics.csv`` into ``summary.csv`` and render the known tables."""
    root, out = Path(root), Path(out)
    if not root.is_dir():
        raise FileNotFoundError(f"{root}: no such directory")
    made: list[Path] = []
    summary = []
    with plt.rc_context(STYLE):
        for p in sorted(root.rglob("metrics.csv")):
            header, rows = read_csv(p)
            tag = _label(p, root)
            summary.extend([tag, k, v] for k, v in rows)
        for p in sorted(root.rglob("table1.csv")):
            plot_table1(p, out, made)
        for p in sorted(root.rglob("fidelity.csv")):
            tag = _label(p, root)
            plot_fidelity(p, out, made, tag)
            _, rows = read_csv(p)
            summary.append([tag, "mean_cd_e3", f"{np.mean([_num(r[3]) for r in rows]):.6g}"])
        for p in sorted(root.rglob("weight_distance.csv")):
            plot_weight_matrix(p, out, made, _label(p, root))
        for folder in sorted({p.parent for p in root.rglob("hist_*.csv")}):
            plot_histograms(folder, out, made, _label(folder / "x", root))
        for p in sorted(root.rglob("*.loss.csv")):
            plot_loss(p, out, made)
        for p in sorted(root.rglob("snapshots.csv")):
            plot_segmentation(p.parent, out, made, _label(p, root))
    write_table(out / "summary.csv", ["source", "key", "value"], summary)
    made.append(out / "summary.csv")
    return made
