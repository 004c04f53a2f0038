import numpy as np
import pytest

from treefield import isoextract as iso
from treefield.metrics import hausdorff
from treefield.sampling import Ball


def ball_field(r=0.5):
    return lambda p: (np.linalg.norm(p, axis=1) <= r).astype(np.float32)


def smooth_ball(r=0.5):
    # a graded field keeps the interpolated vertices on the true sphere
    return lambda p: 0.5 - (np.linalg.norm(p, axis=1) - r)


def test_cell_centers_layout():
    c = iso.cell_centers(4, 2)
    assert c.shape == (16, 2)
    np.testing.assert_allclose(c[0], [-0.75, -0.75])
    np.testing.assert_allclose(c[1], [-0.75, -0.25])


def test_sample_grid_constant_and_linear():
    g = iso.sample_grid(lambda p: np.ones(len(p)), 8)
    assert np.all(g.values == 1)
    g = iso.sample_grid(lambda p: p[:, 0], 8)
    assert np.all(np.diff(g.values, axis=0) > 0)
    with pytest.raises(ValueError):
        iso.sample_grid(lambda p: p[:, 0], 1)


def test_marching_cubes_empty():
    assert iso.marching_cubes(iso.VoxelGrid(np.zeros((8, 8, 8)))).empty


def test_sphere_mesh_properties():
    g = iso.sample_grid(ball_field(), 64)
    mesh = iso.marching_cubes(g)
    r = np.linalg.norm(mesh.vertices, axis=1)
    assert np.all(np.abs(r - 0.5) <= 2 * (2 / 64))
    assert mesh.euler_characteristic() == 2
    assert mesh.is_watertight()
    assert mesh.is_consistently_oriented()


def test_interpolated_vertices_on_sphere():
    g = iso.sample_grid(smooth_ball(), 32)
    mesh = iso.marching_cubes(g)
    r = np.linalg.norm(mesh.vertices, axis=1)
    assert np.abs(r - 0.5).max() < 0.01


def test_disk_area_by_shoelace():
    g = iso.sample_grid(lambda p: (np.linalg.norm(p, axis=1) <= 0.5).astype(float), 64, d=2)
    lines = iso.marching_squares(g)
    assert len(lines) == 1
    loop = lines[0]
    np.testing.assert_allclose(loop[0], loop[-1])
    assert abs(iso.polygon_area(loop) / (np.pi * 0.25) - 1) < 0.05


def test_multiresolution_consistency():
    field = ball_field(0.45)
    pts = {n: iso.extract_surface_points(field, n, 3000, seed=1) for n in (32, 64)}
    assert hausdorff(pts[32], pts[64]) <= 2 * (2 / 32)


def tetra():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], float)
    f = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]])
    return iso.Mesh(v, f)


def test_mesh_roundtrip(tmp_path):
    m = tetra()
    assert m.is_watertight() and m.is_consistently_oriented() and m.euler_characteristic() == 2
    m.save(tmp_path / "t.obj")
    back = iso.Mesh.load(tmp_path / "t.obj")
    np.testing.assert_array_equal(back.faces, m.faces)
    np.testing.assert_allclose(back.vertices, m.vertices, atol=1e-6)


def test_sphere_mesh_roundtrip_counts(tmp_path):
    mesh = iso.marching_cubes(iso.sample_grid(ball_field(), 32))
    mesh.save(tmp_path / "s.obj")
    back = iso.Mesh.load(tmp_path / "s.obj")
    assert len(back.vertices) == len(mesh.vertices) and len(back.faces) == len(mesh.faces)


def test_mesh_load_errors(tmp_path):
    p = tmp_path / "bad.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 4\n")
    with pytest.raises(iso.MeshFormatError):
        iso.Mesh.load(p)
    p.write_text("v 0 0 0\nv 1 0 zero\n")
    with pytest.raises(iso.MeshFormatError, match=":2:"):
        iso.Mesh.load(p)


def test_grid_roundtrip(tmp_path):
    g = iso.VoxelGrid(np.random.default_rng(0).random((6, 6, 6)).astype(np.float32))
    g.save(tmp_path / "g.vox")
    raw = (tmp_path / "g.vox").read_bytes()
    assert raw[:4] == b"VOX1" and len(raw) == 16 + 4 * 216
    assert iso.VoxelGrid.load(tmp_path / "g.vox").values.tobytes() == g.values.tobytes()
    (tmp_path / "g.vox").write_bytes(raw[:-4])
    with pytest.raises(iso.GridFormatError):
        iso.VoxelGrid.load(tmp_path / "g.vox")
    with pytest.raises(iso.GridFormatError):
        iso.VoxelGrid(np.array([[np.nan, 0], [0, 0]]))


def test_surface_sample_single_triangle():
    m = iso.Mesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
    p = iso.surface_sample(m, 1000, seed=0)
    assert np.all(p[:, 2] == 0) and np.all(p[:, :2] >= 0) and np.all(p[:, :2].sum(1) <= 1 + 1e-12)


def test_surface_sample_area_weighting():
    # areas 1 and 3
    v = [[0, 0, 0], [2, 0, 0], [0, 1, 0], [10, 0, 0], [16, 0, 0], [10, 1, 0]]
    m = iso.Mesh(v, [[0, 1, 2], [3, 4, 5]])
    p = iso.surface_sample(m, 10_000, seed=3)
    frac = np.mean(p[:, 0] >= 10)
    assert abs(frac - 0.75) <= 0.03


def test_surface_sample_sphere_norm():
    mesh = iso.marching_cubes(iso.sample_grid(smooth_ball(1.0 - 1e-3), 48))
    assert mesh.vertices.max() < 1.0
    p = iso.surface_sample(mesh, 5000, seed=0)
    assert abs(np.linalg.norm(p, axis=1).mean() - 1.0) < 0.01


def test_surface_sample_errors():
    with pytest.raises(iso.SamplingError):
        iso.surface_sample(iso.Mesh(), 10)
    flat = iso.Mesh([[0, 0, 0], [1, 0, 0], [2, 0, 0]], [[0, 1, 2]])
    with pytest.raises(iso.SamplingError):
        iso.surface_sample(flat, 10)


def test_ball_oracle_through_grid():
    g = iso.sample_grid(Ball(0.5).occupancy, 16)
    assert g.values.sum() > 0
