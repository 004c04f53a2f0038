import numpy as np
import pytest

from treefield import segmentation as seg
from treefield.inr import FitConfig, InrArch, fit, zeros_checkpoint
from treefield.sampling import Ball


@pytest.fixture(scope="module")
def ball_ckpt():
    return fit(Ball(0.5), InrArch(3, 32, 1), FitConfig(max_iters=600, batch=2048, lr=3e-3, schedule="cosine"))


def test_constant_image_converges_and_masks_empty():
    img = seg.ImageField(np.full((16, 16), 0.3))
    ck, snaps = seg.fit_image(img, InrArch(2, 16, 1), FitConfig(max_iters=300, batch=256, lr=1e-2), snapshot_every=100)
    np.testing.assert_allclose(seg.reconstruct(ck, img), 0.3, atol=0.01)
    assert [s.iteration for s in snaps] == [100, 200, 300]
    assert all(not s.mask.any() for s in snaps)


def test_threshold_near_one_is_empty():
    ck = zeros_checkpoint(InrArch(3, 8, 1))
    assert seg.threshold_mask(ck, 16, 0.999).values.sum() == 0
    assert seg.threshold_mask(ck, 16, 0.5).values.all()
    with pytest.raises(ValueError):
        seg.threshold_mask(ck, 16, 1.0)


def test_fitted_ball_mask_volume(ball_ckpt):
    m = seg.threshold_mask(ball_ckpt, 64, 0.5).values
    assert abs(m.mean() / (np.pi / 48) - 1) < 0.1


def test_masks_nested_in_tau(ball_ckpt):
    masks = [seg.threshold_mask(ball_ckpt, 32, t).values > 0 for t in (0.1, 0.3, 0.5, 0.7, 0.9)]
    for lo, hi in zip(masks, masks[1:]):
        assert np.all(hi <= lo)
    fr = [f for _, f in seg.tau_sweep(ball_ckpt, 32, [0.1, 0.5, 0.9])]
    assert fr == sorted(fr, reverse=True)


def test_fixture():
    fx = seg.synthetic_vessel_image(seed=2, n=64, bifurcations=3)
    assert fx.image.values.min() >= 0 and fx.image.values.max() <= 1
    assert 0.01 < fx.mask.mean() < 0.3
    # foreground 0.9, background 0.1 away from edges
    assert abs(np.median(fx.clean[~fx.mask]) - 0.1) < 1e-3
    assert abs(np.median(fx.image.values - fx.clean) - 0.0) < 2e-3
    assert abs(np.std(fx.image.values - fx.clean) - 0.02) < 2e-3
    again = seg.synthetic_vessel_image(seed=2, n=64, bifurcations=3)
    assert again.image.values.tobytes() == fx.image.values.tobytes()


def test_fit_image_improves_dice():
    fx = seg.synthetic_vessel_image(seed=0, n=32, bifurcations=1)
    cfg = FitConfig(max_iters=600, batch=1024, lr=1e-2, schedule="cosine")
    _, snaps = seg.fit_image(fx.image, InrArch(2, 32, 1), cfg, snapshot_every=200)
    d = [seg.dice(s.mask, fx.mask) for s in snaps]
    assert d[-1] > 0.7 and d[-1] >= d[0]


def test_dice():
    a = np.zeros((4, 4), bool)
    assert seg.dice(a, a) == 1.0
    b = a.copy()
    b[0, :2] = True
    c = a.copy()
    c[0, 1:3] = True
    assert seg.dice(b, c) == 0.5


def test_pgm_roundtrip(tmp_path):
    v = np.random.default_rng(0).random((7, 5))
    seg.write_pgm(tmp_path / "a.pgm", v)
    raw = (tmp_path / "a.pgm").read_bytes()
    assert raw.startswith(b"P5\n5 7\n255\n") and len(raw) == 11 + 35
    np.testing.assert_allclose(seg.read_pgm(tmp_path / "a.pgm"), v, atol=0.5 / 255 + 1e-12)
    with pytest.raises(ValueError):
        seg.write_pgm(tmp_path / "b.pgm", np.zeros((2, 2, 2)))


def test_image_field_validation():
    with pytest.raises(ValueError):
        seg.ImageField(np.full((4, 4), 1.5))
    with pytest.raises(ValueError):
        seg.ImageField(np.zeros((4, 5)))
    with pytest.raises(ValueError):
        seg.fit_image(seg.ImageField(np.zeros((4, 4))), InrArch(3, 4, 1))
