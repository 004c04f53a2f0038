"""Command-line pipeline: gen-data, fit, extract, train-ddm, sample, evaluate, segment, report.

Every command takes ``--config FILE`` (``key = value`` lines, ``#`` comments)
and repeatable ``--set key=value`` overrides. Unknown keys are rejected. The
resolved config is written next to the outputs.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import gradcore as gc
from .diffusion import DatasetError, DenoiserFormatError, DiffusionConfig, DiffusionModel, ddim_sample, train_diffusion
from .inr import CheckpointFormatError, FitConfig, InrArch, InrCheckpoint, TrainingError
from .ingestion import IngestionError
from .isoextract import GridFormatError, MeshFormatError, SamplingError, marching_cubes, marching_squares, sample_grid
from .metrics import (
    MetricError,
    MetricsReport,
    compression_ratio,
    generative_set_metrics,
    histogram_intersection,
    weight_distance_matrix,
    write_histogram_csv,
    write_table,
)
from .pipeline import (
    TABLE1_HEADER,
    ConfigError,
    DataError,
    Manifest,
    fidelity_cd,
    field_skeleton,
    fit_manifest,
    parallel_map,
    parse_archs,
    parse_range,
    seed_for,
    surface_points,
    table1_rows,
    write_corpus,
)
from .treegen import TreeFormatError

log = logging.getLogger("treefield")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

DEFAULTS = {
    "seed": 0,
    "d": 3,
    "D": 128,
    "L": 3,
    "fit.iters": 3000,
    "fit.lr": 1e-3,
    "fit.lr_min": 1e-5,
    "fit.schedule": "cosine",
    "fit.batch": 4096,
    "fit.surface_fraction": 0.5,
    "fit.band": 0.05,
    "fit.warmup": 100,
    "ddm.epochs": 6000,
    "ddm.batch": 8,
    "ddm.lr": 1e-3,
    "ddm.H": 128,
    "ddm.blocks": 4,
    "ddm.heads": 4,
    "ddm.C": 576,
    "ddm.T": 1000,
    "ddm.beta_start": 1e-4,
    "ddm.beta_end": 1e-2,
    "ddm.tol": 0.0,  # 0 disables early stopping
    "sample.steps": 50,
    "sample.eta": 0.0,
    "metrics.points": 8192,
    "metrics.res": 64,
    "metrics.gt_res": 128,
    "metrics.skeleton_res": 64,
    "metrics.bins": 10,
}


# config ---------------------------------------------------------------------


def _coerce(key: str, raw: str):
    kind = type(DEFAULTS[key])
    try:
        return kind(raw) if kind is not int else int(raw, 0)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot read {raw!r} as {kind.__name__}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict:
    out = {}
    for no, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{no}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"{source}:{no}: unknown key {key!r}")
        out[key] = _coerce(key, val)
    return out


def resolve_config(args) -> dict:
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        p = Path(args.config)
        if not p.exists():
            raise ConfigError(f"{p}: config file not found")
        cfg.update(parse_config_text(p.read_text(encoding="utf-8"), str(p)))
    for item in getattr(args, "set", None) or []:
        cfg.update(parse_config_text(item, "--set"))
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    if cfg["fit.schedule"] not in ("constant", "cosine"):
        raise ConfigError(f"fit.schedule must be constant or cosine, got {cfg['fit.schedule']!r}")
    return cfg


def write_resolved(cfg: dict, out_dir: Path, name: str) -> None:
    lines = [f"{k} = {cfg[k]}" for k in sorted(cfg)]
    (out_dir / f"{name}.config.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def arch_of(cfg) -> InrArch:
    try:
        return InrArch(cfg["d"], cfg["D"], cfg["L"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def fit_config(cfg) -> FitConfig:
    return FitConfig(
        max_iters=cfg["fit.iters"],
        lr=cfg["fit.lr"],
        lr_min=cfg["fit.lr_min"],
        schedule=cfg["fit.schedule"],
        batch=cfg["fit.batch"],
        surface_fraction=cfg["fit.surface_fraction"],
        band=cfg["fit.band"],
        warmup=cfg["fit.warmup"],
    )


def ddm_config(cfg) -> DiffusionConfig:
    return DiffusionConfig(
        epochs=cfg["ddm.epochs"],
        batch=cfg["ddm.batch"],
        lr=cfg["ddm.lr"],
        seed=seed_for(cfg["seed"], "ddm"),
        H=cfg["ddm.H"],
        blocks=cfg["ddm.blocks"],
        heads=cfg["ddm.heads"],
        C=cfg["ddm.C"],
        T=cfg["ddm.T"],
        beta_start=cfg["ddm.beta_start"],
        beta_end=cfg["ddm.beta_end"],
        tol=cfg["ddm.tol"] or None,
    )


class JsonLines(logging.Handler):
    """One JSON object per record; timestamps live only here."""

    def __init__(self, path):
        super().__init__()
        self.fh = open(path, "a", encoding="utf-8")

    def emit(self, record):
        self.fh.write(json.dumps({"t": round(record.created, 3), "level": record.levelname, "msg": record.getMessage()}) + "\n")
        self.fh.flush()

    def close(self):
        self.fh.close()
        super().close()


def _out_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _attach_log(out: Path) -> JsonLines:
    h = JsonLines(out / "log.jsonl")
    logging.getLogger("treefield").addHandler(h)
    return h


# commands -------------------------------------------------------------------


def cmd_gen_data(args, cfg):
    out = _out_dir(args.out)
    ks = parse_range(args.bifurcations)
    if args.n < 1 or not ks or min(ks) < 0:
        raise ConfigError("need --n >= 1 and non-negative bifurcation counts")
    m = write_corpus(out, args.n, ks, cfg["seed"], cfg["d"], args.wiggle)
    write_resolved(cfg, out, "gen-data")
    log.info("gen-data: wrote %d trees to %s", len(m.items), out)
    print(m.path)


def cmd_fit(args, cfg):
    m = Manifest.load(args.manifest)
    arch = arch_of(cfg)
    t0 = time.time()
    n = fit_manifest(m, arch, fit_config(cfg), cfg["seed"], args.workers)
    write_resolved(cfg, m.root, "fit")
    log.info("fit: %d fitted, %d reused, %.1fs", n, len(m.items) - n, time.time() - t0)
    print(f"fitted {n}, reused {len(m.items) - n}")


def _checkpoint_inputs(args) -> list[tuple[str, InrCheckpoint]]:
    if args.manifest:
        m = Manifest.load(args.manifest)
        return [(Path(it.checkpoint).stem, c) for it, c in zip(m.items, m.checkpoints())]
    items = []
    for p in args.ckpt or []:
        items.append((Path(p).stem, InrCheckpoint.load(p)))
    for p in sorted(Path(args.ckpt_dir).glob("*.inr")) if args.ckpt_dir else []:
        items.append((p.stem, InrCheckpoint.load(p)))
    if not items:
        raise ConfigError("no inputs: pass --manifest, --ckpt or --ckpt-dir")
    return items


def cmd_extract(args, cfg):
    out = _out_dir(args.out)
    resolutions = parse_range(args.res)
    rows = []
    for name, ck in _checkpoint_inputs(args):
        for n in resolutions:
            grid = sample_grid(ck, n, ck.d)
            if args.grids:
                grid.save(out / f"{name}_n{n}.vox")
            if ck.d == 3:
                mesh = marching_cubes(grid)
                path = out / f"{name}_n{n}.obj"
                mesh.save(path)
                rows.append([name, n, len(mesh.vertices), len(mesh.faces), path.stat().st_size, len(ck.to_bytes())])
            else:
                lines = marching_squares(grid)
                rows.append([name, n, sum(len(l) for l in lines), len(lines), 0, len(ck.to_bytes())])
    write_table(out / "extract.csv", ["name", "res", "vertices", "faces", "mesh_bytes", "checkpoint_bytes"], rows)
    write_resolved(cfg, out, "extract")
    log.info("extract: %d outputs", len(rows))


def cmd_train_ddm(args, cfg):
    m = Manifest.load(args.manifest)
    cks = m.checkpoints()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    model = train_diffusion(cks, ddm_config(cfg))
    model.save(out)
    loss_path = out.with_suffix(".loss.csv")
    write_table(loss_path, ["epoch", "loss"], [[i, v] for i, v in enumerate(model.losses)])
    write_resolved(cfg, out.parent, "train-ddm")
    log.info("train-ddm: %d epochs, final loss %.4g", len(model.losses), model.losses[-1])
    print(f"final loss {model.losses[-1]:.6g}")


def _sample_job(job):
    model_path, steps, eta, seed = job
    return ddim_sample(DiffusionModel.load(model_path), steps, eta, seed, 1)[0]


def cmd_sample(args, cfg):
    out = _out_dir(args.out)
    if args.k < 1:
        raise ConfigError("--k must be >= 1")
    DiffusionModel.load(args.model)  # fail early on a bad file
    jobs = [(args.model, cfg["sample.steps"], cfg["sample.eta"], seed_for(cfg["seed"], "sample", i)) for i in range(args.k)]
    for i, ck in enumerate(parallel_map(_sample_job, jobs, args.workers)):
        ck.save(out / f"sample_{i:04d}.inr")
    write_resolved(cfg, out, "sample")
    log.info("sample: wrote %d checkpoints", args.k)


def _stats_job(job):
    field, res, d = job
    s = field_skeleton(field, res, d)
    return s.tortuosity_per_branch, s.total_length, s.average_radius


def _collect_stats(fields, res, d):
    tort, length, radius = [], [], []
    for tb, tl, r in parallel_map(_stats_job, [(f, res, d) for f in fields]):
        tort.extend(tb)
        length.append(tl)
        radius.append(r)
    return np.array(tort), np.array(length), np.array(radius)


def _points_or_none(cks, res, npts, seed, d):
    out = []
    for i, c in enumerate(cks):
        try:
            out.append(surface_points(c, res, npts, seed + i, d))
        except SamplingError:
            out.append(None)
    return out


def cmd_evaluate(args, cfg):
    out = _out_dir(args.out)
    done = False
    if args.table1:
        archs = parse_archs(args.archs, cfg["d"]) if args.archs else [InrArch(3, D, L) for D in (64, 128, 256, 512, 1024) for L in (1, 3, 5)]
        write_table(out / "table1.csv", TABLE1_HEADER, table1_rows(archs))
        done = True
    if args.manifest:
        m = Manifest.load(args.manifest)
        trees, cks = m.trees(), m.checkpoints()
        res, npts, gt_res = cfg["metrics.res"], cfg["metrics.points"], cfg["metrics.gt_res"]
        input_bytes = 4 * gt_res ** cks[0].d
        rows = []
        for i, (it, tree, ck) in enumerate(zip(m.items, trees, cks)):
            cd = fidelity_cd(tree, ck, res, npts, gt_res, seed=seed_for(cfg["seed"], "eval", i))
            rows.append([Path(it.tree).stem, it.bifurcations, it.fit_loss, 1e3 * cd, compression_ratio(input_bytes, ck)])
        write_table(out / "fidelity.csv", ["tree", "bifurcations", "fit_loss", "cd_e3", "compression_ratio"], rows)
        groups: dict[int, list] = {}
        for it, ck in zip(m.items, cks):
            groups.setdefault(it.bifurcations, []).append(ck)
        keys, mat = weight_distance_matrix(groups)
        write_table(out / "weight_distance.csv", ["bifurcations"] + keys, [[k] + list(r) for k, r in zip(keys, mat)])
        cds = np.array([r[3] for r in rows])
        if np.isnan(cds).any():
            log.warning("evaluate: %d INRs have no surface at res %d", int(np.isnan(cds).sum()), res)
        if np.isnan(cds).all():
            raise MetricError("no training INR has a surface; fidelity is undefined")
        report = {
            "cd_e3": float(np.nanmean(cds)),
            "n_empty": int(np.isnan(cds).sum()),
            "compression_ratio": float(rows[0][4]),
            "fit_loss": float(np.mean([r[2] for r in rows if r[2] is not None])),
        }
        d = cks[0].d
        t_tr, l_tr, r_tr = _collect_stats(cks, cfg["metrics.skeleton_res"], d)
        if args.samples:
            gen = [InrCheckpoint.load(p) for p in sorted(Path(args.samples).glob("*.inr"))]
            if not gen:
                raise DataError(f"{args.samples}: no .inr samples found")
            if any(g.arch != cks[0].arch for g in gen):
                raise DataError("sample architecture differs from the training corpus")
            seed = seed_for(cfg["seed"], "eval", 10_000)
            gpts = _points_or_none(gen, res, npts, seed, d)
            rpts = _points_or_none(cks, res, npts, seed + 5000, d)
            report["n_gen_empty"] = sum(p is None for p in gpts)
            gpts, rpts = [p for p in gpts if p is not None], [p for p in rpts if p is not None]
            if not gpts:
                raise MetricError("no generated sample has a surface; set metrics are undefined")
            sm = generative_set_metrics(gpts, rpts)
            report.update(mmd_e3=1e3 * sm.mmd, cov=sm.cov, one_nna_pct=sm.one_nna_pct)
            t_g, l_g, r_g = _collect_stats(gen, cfg["metrics.skeleton_res"], d)
            gen_stats = {"tortuosity": t_g, "total_length": l_g, "average_radius": r_g}
            report["tortuosity_hist_intersection"] = histogram_intersection(t_g, t_tr, cfg["metrics.bins"])
        else:
            gen_stats = {}
        train_stats = {"tortuosity": t_tr, "total_length": l_tr, "average_radius": r_tr}
        for name, vals in train_stats.items():
            # shared edges so train and generated histograms line up
            edges = np.histogram_bin_edges(np.concatenate([vals, gen_stats.get(name, [])]), cfg["metrics.bins"])
            write_histogram_csv(out / f"hist_train_{name}.csv", vals, edges)
            if name in gen_stats:
                write_histogram_csv(out / f"hist_gen_{name}.csv", gen_stats[name], edges)
        prov = {"seed": cfg["seed"], "res": res, "gt_res": gt_res, "points": npts, "n_train": len(cks)}
        MetricsReport(report, prov).write_csv(out / "metrics.csv")
        done = True
    if not done:
        raise ConfigError("evaluate needs --table1 and/or --manifest")
    write_resolved(cfg, out, "evaluate")


def cmd_segment(args, cfg):
    from .segmentation import dice, fit_image, reconstruct, synthetic_vessel_image, tau_sweep, write_pgm
    from .metrics import relative_error

    out = _out_dir(args.out)
    fx = synthetic_vessel_image(seed_for(cfg["seed"], "segment"), n=args.n, bifurcations=args.bifurcations)
    arch = InrArch(2, cfg["D"], cfg["L"])
    fcfg = fit_config(cfg)
    fcfg.seed = seed_for(cfg["seed"], "segment", 1)
    ck, snaps = fit_image(fx.image, arch, fcfg, args.snapshot_every, args.tau)
    ck.save(out / "image.inr")
    rec = reconstruct(ck, fx.image)
    write_pgm(out / "image.pgm", fx.image.values)
    write_pgm(out / "ground_truth.pgm", fx.mask)
    write_pgm(out / "reconstruction.pgm", rec)
    for s in snaps:
        write_pgm(out / f"mask_{s.iteration:06d}.pgm", s.mask)
    write_table(out / "snapshots.csv", ["iteration", "dice", "foreground"], [[s.iteration, dice(s.mask, fx.mask), int(s.mask.sum())] for s in snaps])
    taus = np.round(np.linspace(0.1, 0.9, 9), 3) if args.tau_sweep else [args.tau]
    write_table(out / "tau_sweep.csv", ["tau", "foreground_fraction"], tau_sweep(ck, fx.image.n, taus))
    report = {
        "rel_err_pct": relative_error(rec, fx.clean),
        "rel_err_noisy_pct": relative_error(rec, fx.image.values),
        "dice": dice(snaps[-1].mask, fx.mask),
        "fit_loss": ck.metadata["final_loss"],
    }
    MetricsReport(report, fx.meta | {"tau": args.tau, "D": arch.D, "L": arch.L}).write_csv(out / "metrics.csv")
    write_resolved(cfg, out, "segment")
    print(f"relative error {report['rel_err_pct']:.3f}%  dice {report['dice']:.4f}")


def cmd_report(args, cfg):
    from .report import build_report

    out = _out_dir(args.out)
    made = build_report(Path(args.inputs), out)
    for p in made:
        print(p)


# parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--seed", type=int, help="master seed (overrides config)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="treefield", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", parents=[common], help="generate a tree corpus and manifest")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--bifurcations", default="1..4", help="e.g. 1..4 or 1,3,5")
    s.add_argument("--wiggle", type=float, default=0.3)
    s.add_argument("--out", default="data")
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("fit", parents=[common], help="fit one INR per tree in a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--workers", type=int, help="defaults to TREEFIELD_THREADS or the CPU count")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("extract", parents=[common], help="meshes or grids from checkpoints")
    s.add_argument("--manifest")
    s.add_argument("--ckpt", action="append")
    s.add_argument("--ckpt-dir")
    s.add_argument("--res", default="32,64", help="resolutions, e.g. 32,64,128")
    s.add_argument("--grids", action="store_true", help="also write VOX1 grids")
    s.add_argument("--out", default="extract")
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("train-ddm", parents=[common], help="train the weight-space denoiser")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", default="model.ddm")
    s.set_defaults(func=cmd_train_ddm)

    s = sub.add_parser("sample", parents=[common], help="draw new INR checkpoints")
    s.add_argument("--model", required=True)
    s.add_argument("--k", type=int, default=8)
    s.add_argument("--workers", type=int)
    s.add_argument("--out", default="samples")
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("evaluate", parents=[common], help="metric tables and histograms")
    s.add_argument("--table1", action="store_true", help="parameter/size table")
    s.add_argument("--archs", help="D list x L list, e.g. 16,64x1,3")
    s.add_argument("--manifest", help="training corpus (fidelity, weight distances, histograms)")
    s.add_argument("--samples", help="directory of generated .inr files")
    s.add_argument("--out", default="eval")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("segment", parents=[common], help="intensity-INR segmentation fixture")
    s.add_argument("--n", type=int, default=64)
    s.add_argument("--bifurcations", type=int, default=3)
    s.add_argument("--tau", type=float, default=0.5)
    s.add_argument("--tau-sweep", action="store_true")
    s.add_argument("--snapshot-every", type=int, default=500)
    s.add_argument("--out", default="segment")
    s.set_defaults(func=cmd_segment)

    s = sub.add_parser("report", parents=[common], help="summary table and figures from CSV outputs")
    s.add_argument("--in", dest="inputs", required=True, help="directory holding earlier outputs")
    s.add_argument("--out", default="report")
    s.set_defaults(func=cmd_report)
    return p


DATA_ERRORS = (
    DataError,
    FileNotFoundError,
    CheckpointFormatError,
    DenoiserFormatError,
    DatasetError,
    TreeFormatError,
    GridFormatError,
    MeshFormatError,
    IngestionError,
    gc.DimensionError,
)
NUMERIC_ERRORS = (gc.NonFiniteError, TrainingError, FloatingPointError, MetricError)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    console = logging.StreamHandler()
    console.setLevel(logging.INFO if args.verbose else logging.WARNING)
    console.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    log.addHandler(console)
    log.propagate = False
    handler = None
    try:
        cfg = resolve_config(args)
        out = getattr(args, "out", None)
        target = None
        if args.command == "fit":
            target = Path(args.manifest).parent
        elif out is not None:
            target = Path(out).parent if args.command == "train-ddm" else Path(out)
        if target is not None and (args.command != "fit" or target.is_dir()):
            target.mkdir(parents=True, exist_ok=True)
            handler = _attach_log(target)
            log.setLevel(logging.INFO)
        args.func(args, cfg)
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NUMERIC_ERRORS as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    finally:
        if handler is not None:
            log.removeHandler(handler)
            handler.close()
        log.removeHandler(console)


if __name__ == "__main__":
    sys.exit(main())
