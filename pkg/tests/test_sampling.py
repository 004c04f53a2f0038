import numpy as np
import pytest

from treefield.sampling import Ball, Constant, PointSampler, sample_points
from treefield.treegen import generate_tree


def test_uniform_rate_in_ball():
    # ball of radius 0.5 fills pi/48 of the cube
    b = sample_points(Ball(0.5), 20000, surface_fraction=0.0, seed=0)
    assert b.n_surface == 0
    assert abs(b.occupancies.mean() - np.pi / 48) < 0.01


def test_band_points_within_band():
    tree = generate_tree(1, 3, 4)
    b = sample_points(tree, 4000, surface_fraction=0.5, band=0.03, seed=2)
    assert b.n_surface == 2000
    sd = tree.signed_distance(b.points[:2000].astype(np.float64))
    assert np.all(np.abs(sd) <= 0.03)
    np.testing.assert_array_equal(b.occupancies, (tree.signed_distance(b.points.astype(np.float64)) <= 0))


def test_floor_of_surface_fraction():
    assert sample_points(Ball(), 11, surface_fraction=0.5).n_surface == 5


def test_deterministic_per_seed():
    a = sample_points(Ball(0.3), 500, seed=4)
    b = sample_points(Ball(0.3), 500, seed=4)
    c = sample_points(Ball(0.3), 500, seed=5)
    assert a.points.tobytes() == b.points.tobytes()
    assert a.points.tobytes() != c.points.tobytes()


def test_band_distribution_matches_plain_rejection():
    # radial profile of accepted band points vs plain rejection from the cube
    ball = Ball(0.5)
    got = sample_points(ball, 20000, surface_fraction=1.0, band=0.05, seed=0).points
    rng = np.random.default_rng(1)
    cand = rng.uniform(-1, 1, (400000, 3))
    ref = cand[np.abs(ball.signed_distance(cand)) <= 0.05]
    qs = [0.1, 0.25, 0.5, 0.75, 0.9]
    np.testing.assert_allclose(
        np.quantile(np.linalg.norm(got, axis=1), qs), np.quantile(np.linalg.norm(ref, axis=1), qs), atol=2e-3
    )


def test_constant_oracle_falls_back_to_uniform():
    b = sample_points(Constant(1.0), 100, surface_fraction=0.5)
    assert b.n_surface == 0 and np.all(b.occupancies == 1)


def test_2d():
    b = sample_points(Ball(0.5, dim=2), 1000, seed=0)
    assert b.points.shape == (1000, 2)


def test_argument_errors():
    with pytest.raises(ValueError):
        PointSampler(Ball(), band=0)
    s = PointSampler(Ball())
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        s.draw(0, 0.5, rng)
    with pytest.raises(ValueError):
        s.draw(10, 1.5, rng)
