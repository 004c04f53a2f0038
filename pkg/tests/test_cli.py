import csv

import numpy as np
import pytest

from treefield import cli
from treefield.inr import InrArch, InrCheckpoint
from treefield.pipeline import ConfigError, Manifest, corpus_plan, parse_archs, parse_range, seed_for, worker_count

FAST = ["--set", "D=16", "--set", "L=1", "--set", "fit.iters=300", "--set", "fit.lr=1e-2", "--set", "fit.batch=512"]


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_gen_data_byte_identical(tmp_path):
    for sub in ("a", "b"):
        assert run("gen-data", "--n", 16, "--bifurcations", "1..4", "--seed", 1, "--out", tmp_path / sub) == 0
    a = (tmp_path / "a" / "manifest.json").read_bytes()
    assert a == (tmp_path / "b" / "manifest.json").read_bytes()
    m = Manifest.load(tmp_path / "a" / "manifest.json")
    assert [it.bifurcations for it in m.items][:5] == [1, 2, 3, 4, 1]
    assert all(it.stats["bifurcation_count"] == it.bifurcations for it in m.items)


def test_adding_items_keeps_existing_seeds():
    assert corpus_plan(6, [1, 2], 3)[:4] == corpus_plan(4, [1, 2], 3)
    assert seed_for(0, "fit", 1) != seed_for(0, "gen", 1)


@pytest.fixture(scope="module")
def fitted(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    assert run("gen-data", "--n", 2, "--bifurcations", "1", "--out", root) == 0
    assert run("fit", "--manifest", root / "manifest.json", "--workers", 1, *FAST) == 0
    return root


def test_fit_then_extract(fitted, tmp_path):
    m = Manifest.load(fitted / "manifest.json")
    assert all(it.checkpoint and it.fit_loss is not None for it in m.items)
    assert m.meta["arch"] == [3, 16, 1]
    assert run("extract", "--manifest", fitted / "manifest.json", "--res", "32,64", "--out", tmp_path) == 0
    for it in m.items:
        stem = it.checkpoint.split("/")[-1][:-4]
        assert (tmp_path / f"{stem}_n32.obj").exists() and (tmp_path / f"{stem}_n64.obj").exists()


def test_fit_is_restartable(fitted, capsys):
    ck = fitted / "checkpoints" / "tree_0000.inr"
    before = ck.read_bytes()
    assert run("fit", "--manifest", fitted / "manifest.json", *FAST) == 0
    assert "fitted 0, reused 2" in capsys.readouterr().out
    ck.write_bytes(b"junk")
    assert run("fit", "--manifest", fitted / "manifest.json", "--workers", 1, *FAST) == 0
    assert ck.read_bytes() == before  # refit reproduces the same bytes


def test_worker_count_does_not_change_results(tmp_path):
    for sub, w in (("one", 1), ("two", 2)):
        assert run("gen-data", "--n", 2, "--bifurcations", "1", "--out", tmp_path / sub) == 0
        assert run("fit", "--manifest", tmp_path / sub / "manifest.json", "--workers", w, *FAST[:6], "--set", "fit.iters=50") == 0
    for name in ("tree_0000.inr", "tree_0001.inr"):
        assert (tmp_path / "one" / "checkpoints" / name).read_bytes() == (tmp_path / "two" / "checkpoints" / name).read_bytes()


def test_table1_csv(tmp_path):
    assert run("evaluate", "--table1", "--archs", "16,64x1,3", "--out", tmp_path) == 0
    with open(tmp_path / "table1.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4
    for r in rows:
        D, L = int(r["D"]), int(r["L"])
        assert int(r["params"]) == (3 * D + D) + L * 2 * (D * D + D) + (D + 1)


def test_full_table1_matches_printed(tmp_path):
    assert run("evaluate", "--table1", "--out", tmp_path) == 0
    with open(tmp_path / "table1.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert all(float(r["params_M"]) == float(r["printed_params_M"]) for r in rows)
    assert sum(int(r["size_match"]) for r in rows) == 14


def test_exit_codes(tmp_path, monkeypatch):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("colour = blue\n")
    assert run("gen-data", "--n", 2, "--out", tmp_path, "--config", cfg) == cli.EXIT_CONFIG
    assert run("gen-data", "--n", 2, "--out", tmp_path, "--set", "D=abc") == cli.EXIT_CONFIG
    assert run("gen-data", "--n", 2, "--out", tmp_path, "--bifurcations", "4..1") == cli.EXIT_CONFIG
    assert run("fit", "--manifest", tmp_path / "missing.json") == cli.EXIT_DATA
    assert run("sample", "--model", tmp_path / "missing.ddm", "--out", tmp_path / "s") == cli.EXIT_DATA
    (tmp_path / "junk.ddm").write_bytes(b"nope")
    assert run("sample", "--model", tmp_path / "junk.ddm", "--out", tmp_path / "s") == cli.EXIT_DATA
    monkeypatch.setenv("TREEFIELD_THREADS", "zero")
    assert run("gen-data", "--n", 2, "--out", tmp_path / "g") == 0  # serial path never reads it
    with pytest.raises(ConfigError):
        worker_count(4)


def test_threads_env_caps_workers(monkeypatch):
    monkeypatch.setenv("TREEFIELD_THREADS", "3")
    assert worker_count(10) == 3 and worker_count(2) == 2


def test_config_file_parsing(tmp_path):
    text = "# comment\nD = 32   # trailing\n\nfit.schedule = constant\nfit.lr=0.01\n"
    cfg = cli.parse_config_text(text)
    assert cfg == {"D": 32, "fit.schedule": "constant", "fit.lr": 0.01}
    with pytest.raises(ConfigError, match=":1:"):
        cli.parse_config_text("nonsense")


def test_parsers():
    assert parse_range("1..4") == [1, 2, 3, 4] and parse_range("2,5") == [2, 5]
    assert parse_archs("16,64x1,3") == [InrArch(3, 16, 1), InrArch(3, 16, 3), InrArch(3, 64, 1), InrArch(3, 64, 3)]
    with pytest.raises(ConfigError):
        parse_archs("16")


def test_arch_mismatch_in_manifest(fitted, tmp_path):
    import shutil

    root = tmp_path / "copy"
    shutil.copytree(fitted, root)
    InrCheckpoint(InrArch(3, 8, 1), np.zeros(InrArch(3, 8, 1).P)).save(root / "checkpoints" / "tree_0001.inr")
    assert run("train-ddm", "--manifest", root / "manifest.json", "--out", tmp_path / "m.ddm") == cli.EXIT_DATA


def test_report_renders_figures(fitted, tmp_path):
    ev = tmp_path / "eval"
    assert run("evaluate", "--table1", "--manifest", fitted / "manifest.json", "--out", ev,
               "--set", "metrics.points=500", "--set", "metrics.res=32", "--set", "metrics.gt_res=32",
               "--set", "metrics.skeleton_res=32") == 0  # fmt: skip
    assert run("report", "--in", tmp_path, "--out", tmp_path / "rep") == 0
    pngs = sorted(p.name for p in (tmp_path / "rep").glob("*.png"))
    assert "table1_size.png" in pngs and any(p.startswith("weight_distance") for p in pngs)
    assert (tmp_path / "rep" / "summary.csv").read_text().startswith("source,key,value")
