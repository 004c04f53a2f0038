import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from treefield import metrics as mt
from treefield.inr import InrArch, InrCheckpoint
from treefield.isoextract import VoxelGrid
from treefield.thinning import thin
from treefield.treegen import TreeGraph, voxelize


def test_chamfer_hand_values():
    a = np.zeros((1, 3))
    assert mt.chamfer(a, a) == 0.0
    assert mt.chamfer(a, [[1.0, 0, 0]]) == 2.0
    with pytest.raises(mt.MetricError):
        mt.chamfer(np.zeros((0, 3)), a)


def test_chamfer_equals_brute_force_exactly():
    rng = np.random.default_rng(0)
    for _ in range(50):
        a = rng.normal(size=(rng.integers(1, 80), 3))
        b = rng.normal(size=(rng.integers(1, 80), 3))
        assert mt.chamfer(a, b) == mt.chamfer_brute(a, b)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_chamfer_symmetric_nonnegative(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(20, 3)), rng.normal(size=(15, 3))
    assert mt.chamfer(a, b) == mt.chamfer(b, a)
    assert mt.chamfer(a, b) > 0
    assert mt.chamfer(a, a[::-1]) == 0


def test_compression_ratio():
    arch = InrArch(3, 64, 1)
    assert arch.P * 4 == 34_564
    r = mt.compression_ratio(128**3 * 4, arch)
    assert r == pytest.approx(242.7, abs=0.05)
    assert mt.compression_ratio(34_564, arch) == 1.0
    assert mt.compression_ratio(2 * 34_564, InrCheckpoint(arch, np.zeros(arch.P))) == 2.0


def test_relative_error():
    gt = np.array([1.0, 2.0, -3.0])
    assert mt.relative_error(gt, gt) == 0.0
    assert mt.relative_error(1.01 * gt, gt) == pytest.approx(1.0)
    with pytest.raises(mt.MetricError):
        mt.relative_error(gt, np.zeros(3))


def brute_set_metrics(d_gr, d_gg, d_rr):
    """Plain loops over the definitions."""
    G, R = d_gr.shape
    mmd = sum(min(d_gr[g, r] for g in range(G)) for r in range(R)) / R
    covered = set()
    for g in range(G):
        best = 0
        for r in range(R):
            if d_gr[g, r] < d_gr[g, best]:
                best = r
        covered.add(best)
    full = np.block([[d_gg, d_gr], [d_gr.T, d_rr]])
    n = G + R
    correct = 0
    for i in range(n):
        cands = [j for j in range(n) if j != i and full[i, j] > 0]
        if not cands:
            cands = [j for j in range(n) if j != i]
        best = cands[0]
        for j in cands:
            if full[i, j] < full[i, best]:
                best = j
        correct += (best < G) == (i < G)
    return mmd, len(covered) / R, 100.0 * correct / n


def test_identical_sets():
    rng = np.random.default_rng(1)
    sets = [rng.normal(size=(30, 3)) for _ in range(5)]
    m = mt.generative_set_metrics(sets, sets)
    assert m.mmd == 0.0 and m.cov == 1.0 and m.one_nna_pct == 50.0


def test_single_outlier():
    rng = np.random.default_rng(2)
    ref = [rng.normal(size=(20, 3)) for _ in range(4)]
    m = mt.generative_set_metrics([ref[0] + 100.0], ref)
    assert m.cov == 0.25
    assert m.mmd > 1e3


def test_brute_force_equivalence_small_sets():
    rng = np.random.default_rng(3)
    for G, R in itertools.product(range(1, 5), repeat=2):
        for rep in range(3):
            pts = rng.normal(size=(G + R, 2))
            if rep == 2:
                pts = np.round(pts)  # integer grid forces ties and duplicates
            full = ((pts[:, None] - pts[None]) ** 2).sum(-1)
            d_gg, d_gr, d_rr = full[:G, :G], full[:G, G:], full[G:, G:]
            got = mt.set_metrics_from_distances(d_gr, d_gg, d_rr)
            want = brute_set_metrics(d_gr, d_gg, d_rr)
            assert (got.mmd, got.cov, got.one_nna_pct) == pytest.approx(want, abs=0)


def test_hand_3x3():
    gen = [np.array([[0.0, 0, 0]]), np.array([[1.0, 0, 0]]), np.array([[5.0, 0, 0]])]
    ref = [np.array([[0.1, 0, 0]]), np.array([[1.2, 0, 0]]), np.array([[3.0, 0, 0]])]
    m = mt.generative_set_metrics(gen, ref)
    # ref mins (chamfer = 2*d^2): 0.02, 0.08, 8
    assert m.mmd == pytest.approx((0.02 + 0.08 + 8.0) / 3)
    assert m.cov == pytest.approx(1.0)
    # nearest in union: g0->r0 g1->r1 g2->r2 r0->g0 r1->g1 r2->r1 ; correct only r2
    assert m.one_nna_pct == pytest.approx(100 / 6)


def test_one_nna_iid_near_fifty():
    rng = np.random.default_rng(4)
    n = 64
    accs = []
    for _ in range(5):
        gen = rng.normal(size=(n, 4))
        ref = rng.normal(size=(n, 4))
        full = ((np.r_[gen, ref][:, None] - np.r_[gen, ref][None]) ** 2).sum(-1)
        accs.append(mt.set_metrics_from_distances(full[:n, n:], full[:n, :n], full[n:, n:]).one_nna_pct)
    sigma = 100 * np.sqrt(0.25 / (2 * n))
    assert abs(np.mean(accs) - 50.0) < 3 * sigma


def test_weight_distance_matrix():
    arch = InrArch(3, 4, 1)
    rng = np.random.default_rng(5)
    same = InrCheckpoint(arch, rng.normal(size=arch.P))
    groups = {1: [same, InrCheckpoint(arch, same.theta.copy())], 2: [InrCheckpoint(arch, rng.normal(size=arch.P))]}
    keys, m = mt.weight_distance_matrix(groups)
    assert keys == [1, 2]
    assert m[0, 0] == 0.0
    np.testing.assert_allclose(m, m.T)
    np.testing.assert_allclose(m[0, 1], np.linalg.norm(same.theta - groups[2][0].theta), rtol=1e-5)
    with pytest.raises(mt.MetricError):
        mt.weight_distance_matrix({1: [same], 2: [InrCheckpoint(InrArch(3, 8, 1), np.zeros(InrArch(3, 8, 1).P))]})


def straight_tube(n=64, r=0.1):
    tree = TreeGraph(np.array([[0.0, -0.7, 0.0], [0.0, 0.7, 0.0]]), np.array([r, r]), [(0, 1)])
    return tree, voxelize(tree, n)


def test_skeleton_straight_tube():
    tree, grid = straight_tube()
    s = mt.skeleton_stats(grid)
    assert s.branch_count == 1 and s.junction_count == 0
    assert s.tortuosity_per_branch[0] == pytest.approx(1.0, abs=0.1)
    # radius from the distance transform: within one voxel spacing
    assert abs(s.average_radius - 0.1) <= grid.spacing
    # the skeleton stops roughly a radius short of each cap
    assert 1.4 - 2 * 0.1 - 2 * grid.spacing <= s.total_length <= 1.4 + 2 * grid.spacing


def test_skeleton_y_shape():
    pos = np.array([[0.0, -0.7, 0.0], [0.0, 0.0, 0.0], [-0.5, 0.6, 0.0], [0.5, 0.6, 0.0]])
    tree = TreeGraph(pos, np.array([0.08, 0.08, 0.07, 0.07]), [(0, 1), (1, 2), (1, 3)])
    s = mt.skeleton_stats(voxelize(tree, 64))
    assert s.junction_count == 1
    assert s.branch_count == 3


def test_skeleton_preserves_components():
    _, grid = straight_tube()
    assert mt.component_count(thin(grid.values > 0.5)) == mt.component_count(grid.values)


@pytest.mark.parametrize("w", [1, 2, 3, 4])
def test_thin_bar_keeps_a_line(w):
    vol = np.zeros((w + 4, w + 4, 16), bool)
    vol[2 : 2 + w, 2 : 2 + w, 3:13] = True
    sk = thin(vol)
    assert sk.sum() > 0 and sk.sum() <= 10
    assert mt.component_count(sk) == 1
    assert np.all(sk <= vol)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_thin_random_blobs_keep_component_count(seed):
    from scipy import ndimage

    rng = np.random.default_rng(seed)
    vol = ndimage.gaussian_filter(rng.random((14, 14, 14)), 1.5) > 0.52
    sk = thin(vol)
    assert mt.component_count(sk) == mt.component_count(vol)
    assert np.all(sk <= vol)


def test_skeleton_empty_raises():
    with pytest.raises(mt.MetricError):
        mt.skeleton_stats(VoxelGrid(np.zeros((8, 8, 8))))


def test_histogram_intersection_and_csv(tmp_path):
    a = np.linspace(0, 1, 100)
    assert mt.histogram_intersection(a, a) == pytest.approx(1.0)
    assert mt.histogram_intersection(a, a + 10) == 0.0
    p = tmp_path / "h.csv"
    mt.write_histogram_csv(p, a, bins=4)
    lines = p.read_text().splitlines()
    assert lines[0] == "bin_center,count"
    assert sum(int(line.split(",")[1]) for line in lines[1:]) == 100


def test_report_validation(tmp_path):
    rep = mt.MetricsReport({"cov": 0.5, "one_nna_pct": 60.0}, {"seed": 1})
    rep.write_csv(tmp_path / "r.csv")
    assert "meta.seed,1" in (tmp_path / "r.csv").read_text()
    with pytest.raises(mt.MetricError):
        mt.MetricsReport({"cov": 1.5}).validate()
