import itertools

import numpy as np
import pytest

from treefield import gradcore as gc
from treefield.inr import (
    CheckpointFormatError,
    FitConfig,
    InrArch,
    InrCheckpoint,
    checkpoint_size_bytes,
    fit,
    flatten,
    init_layers,
    running_mean,
    unflatten,
    zeros_checkpoint,
)
from treefield.sampling import Ball, Constant, sample_points

# printed parameter counts in millions, rows D, columns L = 1, 3, 5
TABLE_PARAMS_M = {
    64: (0.01, 0.03, 0.04),
    128: (0.03, 0.10, 0.17),
    256: (0.13, 0.40, 0.66),
    512: (0.53, 1.58, 2.63),
    1024: (2.10, 6.30, 10.50),
}


def hand_count(d, D, L):
    return (d * D + D) + L * 2 * (D * D + D) + (D + 1)


@pytest.mark.parametrize("D", sorted(TABLE_PARAMS_M))
def test_param_counts_match_table(D):
    for L, printed in zip((1, 3, 5), TABLE_PARAMS_M[D]):
        assert round(InrArch(3, D, L).P / 1e6, 2) == printed


def test_param_count_golden_grid():
    for d, D, L in itertools.product((2, 3), (16, 64, 128, 256), (1, 3, 5)):
        arch = InrArch(d, D, L)
        assert arch.P == hand_count(d, D, L)
        assert sum(int(np.prod(s)) for _, s in arch.layer_shapes()) == arch.P
    assert InrArch(3, 64, 1).P == 8641
    assert checkpoint_size_bytes(InrArch(3, 64, 1)) == 4 * 8641


def test_flatten_roundtrip_and_order():
    arch = InrArch(2, 5, 2)
    theta = np.arange(arch.P, dtype=np.float32)
    layers = unflatten(theta, arch)
    assert layers[0].shape == (2, 5) and layers[0][0, 1] == 1  # row-major [fan_in, fan_out]
    assert flatten(layers).tobytes() == theta.tobytes()
    with pytest.raises(ValueError):
        unflatten(theta[:-1], arch)


def test_zero_weights_give_half():
    ck = zeros_checkpoint(InrArch(3, 16, 2))
    np.testing.assert_array_equal(ck(np.random.default_rng(0).uniform(-1, 1, (10, 3))), 0.5)


def test_forward_matches_numpy_reference():
    arch = InrArch(3, 8, 2)
    ck = InrCheckpoint(arch, flatten(init_layers(arch, 3)))
    x = np.random.default_rng(1).uniform(-1, 1, (20, 3)).astype(np.float32)
    w = ck.layers()
    h = np.maximum(x @ w[0] + w[1], 0)
    for i in range(arch.L):
        w1, b1, w2, b2 = w[2 + 4 * i : 6 + 4 * i]
        h = h + np.maximum(h @ w1 + b1, 0) @ w2 + b2
    ref = 1 / (1 + np.exp(-(h @ w[-2] + w[-1])))[:, 0]
    np.testing.assert_allclose(ck(x), ref, rtol=1e-5, atol=1e-6)
    with pytest.raises(gc.DimensionError):
        ck(np.zeros((4, 2)))


def test_checkpoint_roundtrip(tmp_path):
    arch = InrArch(3, 16, 1)
    ck = InrCheckpoint(arch, np.random.default_rng(0).normal(size=arch.P), {"source": "x"})
    ck.save(tmp_path / "a.inr")
    raw = (tmp_path / "a.inr").read_bytes()
    assert raw[:4] == b"INR1"
    back = InrCheckpoint.load(tmp_path / "a.inr")
    assert back.theta.tobytes() == ck.theta.tobytes() and back.metadata == {"source": "x"}
    with pytest.raises(CheckpointFormatError, match="magic"):
        InrCheckpoint.from_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointFormatError):
        InrCheckpoint.from_bytes(raw[:100])
    with pytest.raises(CheckpointFormatError):
        InrCheckpoint(arch, np.zeros(arch.P + 1))


def test_constant_oracle_fits_fast():
    ck = fit(Constant(1.0), InrArch(3, 16, 1), FitConfig(max_iters=200, batch=256, lr=1e-2))
    assert ck.metadata["final_loss"] < 1e-4


def test_tol_stops_early():
    ck = fit(Constant(0.0), InrArch(3, 16, 1), FitConfig(max_iters=2000, batch=256, lr=1e-2, tol=1e-3, window=20))
    assert ck.metadata["iterations"] < 2000


def test_ball_fit_is_accurate():
    ball = Ball(0.5)
    cfg = FitConfig(max_iters=600, batch=2048, lr=3e-3, schedule="cosine")
    ck = fit(ball, InrArch(3, 32, 1), cfg)
    test = sample_points(ball, 5000, 0.0, seed=9)
    acc = np.mean((ck(test.points) > 0.5) == (test.occupancies > 0.5))
    assert acc > 0.98


def test_fit_is_deterministic():
    cfg = FitConfig(max_iters=20, batch=128)
    a = fit(Ball(), InrArch(3, 8, 1), cfg)
    b = fit(Ball(), InrArch(3, 8, 1), cfg)
    assert a.theta.tobytes() == b.theta.tobytes()


def test_fit_dimension_mismatch():
    with pytest.raises(gc.DimensionError):
        fit(Ball(dim=2), InrArch(3, 8, 1), FitConfig(max_iters=1))


def test_cosine_schedule_endpoints():
    cfg = FitConfig(max_iters=101, lr=1e-3, lr_min=1e-5, schedule="cosine")
    assert cfg.lr_at(1) == pytest.approx(1e-3)
    assert cfg.lr_at(51) == pytest.approx(0.5 * (1e-3 + 1e-5))
    assert cfg.lr_at(101) == pytest.approx(1e-5)
    with pytest.raises(ValueError):
        FitConfig(schedule="step")


def test_warmup_ramps_then_follows_schedule():
    cfg = FitConfig(max_iters=101, lr=1e-3, schedule="constant", warmup=10)
    assert cfg.lr_at(1) == pytest.approx(1e-4)
    assert cfg.lr_at(5) == pytest.approx(5e-4)
    assert cfg.lr_at(10) == cfg.lr_at(60) == pytest.approx(1e-3)
    cos = FitConfig(max_iters=101, lr=1e-3, lr_min=1e-5, schedule="cosine", warmup=10)
    assert cos.lr_at(101) == pytest.approx(1e-5)
    with pytest.raises(ValueError):
        FitConfig(warmup=-1)


def test_running_mean():
    np.testing.assert_allclose(running_mean(np.arange(10.0), 5), np.arange(2.0, 8.0))
