import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from segisnet import gradcheck, losses, warp
from segisnet.losses import WeightSchedule


def _cube(shape, lo, size=2):
    m = np.zeros(shape + (1,))
    m[lo[0] : lo[0] + size, lo[1] : lo[1] + size, lo[2] : lo[2] + size] = 1
    return m


def test_dice_identical_binary():
    m = (np.random.default_rng(0).uniform(size=(5, 5, 5, 3)) > 0.5).astype(float)
    assert abs(losses.soft_dice_loss(m, m)[0] + 1.0) < 1e-6


def test_dice_disjoint():
    a = _cube((6, 6, 6), (0, 0, 0))
    b = _cube((6, 6, 6), (3, 3, 3))
    assert abs(losses.soft_dice_loss(a, b)[0]) < 1e-6


def test_dice_half_overlap_cubes():
    # two 8-voxel cubes sharing 4 voxels
    a = _cube((6, 6, 6), (1, 1, 1))
    b = _cube((6, 6, 6), (1, 1, 2))
    assert int((a * b).sum()) == 4
    # the smoothing term shifts the value by ~3e-9
    assert losses.soft_dice_loss(a, b)[0] == pytest.approx(-0.5, abs=1e-6)


def test_dice_k_mismatch():
    with pytest.raises(ValueError):
        losses.soft_dice_loss(np.zeros((2, 2, 2, 2)), np.zeros((2, 2, 2, 3)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_dice_range(seed):
    rng = np.random.default_rng(seed)
    pred = rng.uniform(size=(3, 4, 2, 2))
    truth = (rng.uniform(size=pred.shape) > 0.5).astype(float)
    v = losses.soft_dice_loss(pred, truth)[0]
    assert -1.0 < v <= 0.0


def test_mse_examples():
    z = np.zeros((2, 2, 2, 1))
    assert losses.mse_loss(z, z)[0] == 0.0
    assert losses.mse_loss(np.ones((2, 2, 2, 1)), z)[0] == 1.0
    assert losses.mse_loss(np.array([1.0, 2.0]).reshape(1, 1, 2, 1), np.zeros((1, 1, 2, 1)))[0] == 2.5
    with pytest.raises(ValueError):
        losses.mse_loss(z, np.zeros((2, 2, 2, 2)))


def test_smoothness_constant_field():
    u = np.broadcast_to(np.array([0.3, -1.0, 2.0]), (4, 4, 4, 3)).copy()
    assert losses.smoothness_loss(u)[0] == 0.0


def test_smoothness_ramp():
    u = np.zeros((4, 4, 4, 3))
    u[..., 0] = np.arange(4)[:, None, None]
    assert losses.smoothness_loss(u)[0] == pytest.approx(48 / 64, abs=1e-12)


def _smooth_oracle(u):
    X, Y, Z, _ = u.shape
    total = 0.0
    for x in range(X):
        for y in range(Y):
            for z in range(Z):
                for c in range(3):
                    dx = u[x + 1, y, z, c] - u[x, y, z, c] if x + 1 < X else 0.0
                    dy = u[x, y + 1, z, c] - u[x, y, z, c] if y + 1 < Y else 0.0
                    dz = u[x, y, z + 1, c] - u[x, y, z, c] if z + 1 < Z else 0.0
                    total += dx * dx + dy * dy + dz * dz
    return total / (X * Y * Z)


def test_smoothness_matches_loop_oracle():
    rng = np.random.default_rng(1)
    for _ in range(5):
        u = rng.normal(size=tuple(rng.integers(2, 6, size=3)) + (3,))
        assert abs(losses.smoothness_loss(u)[0] - _smooth_oracle(u)) < 1e-9


def test_smoothness_degenerate_dims():
    with pytest.raises(ValueError):
        losses.smoothness_loss(np.zeros((1, 4, 4, 3)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5))
def test_smoothness_translation_invariant(seed, a, b, c):
    u = np.random.default_rng(seed).normal(size=(3, 4, 3, 3))
    shifted = u + np.array([a, b, c])
    assert losses.smoothness_loss(shifted)[0] == pytest.approx(losses.smoothness_loss(u)[0], rel=1e-9, abs=1e-9)


def test_composite_identity_reduces_to_dice():
    rng = np.random.default_rng(2)
    truth = (rng.uniform(size=(4, 5, 6, 2)) > 0.5).astype(float)
    ident = warp.identity_grid((4, 5, 6))
    assert abs(losses.composite_dice_loss(truth, truth, ident)[0] + 1.0) < 1e-5
    pred = rng.uniform(size=truth.shape)
    pred[0, 0, 0, 0] = 0.0
    pred[1, 1, 1, 1] = 1.0
    expected = losses.soft_dice_loss(np.clip(pred, losses.CLIP_LO, losses.CLIP_HI), truth)[0]
    assert losses.composite_dice_loss(truth, pred, ident)[0] == pytest.approx(expected, abs=1e-12)


def test_composite_k_mismatch():
    with pytest.raises(ValueError):
        losses.composite_dice_loss(np.zeros((3, 3, 3, 2)), np.zeros((3, 3, 3, 3)), warp.identity_grid((3, 3, 3)))


@pytest.mark.parametrize("check", [
    gradcheck.check_soft_dice, gradcheck.check_mse, gradcheck.check_smoothness,
    gradcheck.check_composite_pred, gradcheck.check_composite_map,
])
@pytest.mark.parametrize("seed", [0, 1])
def test_loss_gradients_match_finite_differences(check, seed):
    assert check(np.random.default_rng(seed)) < 1e-4


def test_schedule_values():
    s = WeightSchedule()
    assert s.weights(0) == (10.0, 0.1, 1.0)
    assert s.alpha(30) == 100.0 and s.beta(30) == pytest.approx(1.0)
    assert s.alpha(22) == 98.0
    assert [s.alpha(e) for e in range(50)] == sorted(s.alpha(e) for e in range(50))
    with pytest.raises(ValueError):
        s.alpha(-1)


def test_total_loss_hand_value():
    b = losses.total_loss((-1, 0.5, 0.2, -1), WeightSchedule(), 0)
    assert b.total == pytest.approx(3.02, abs=1e-12)
    assert (b.alpha, b.beta, b.gamma) == (10.0, 0.1, 1.0)
    with pytest.raises(ValueError):
        losses.total_loss((0, 0, 0, 0), WeightSchedule(), -1)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=4, max_size=4), st.integers(0, 40), st.floats(-3, 3))
def test_total_loss_breakdown_and_linearity(comps, epoch, bump):
    s = WeightSchedule()
    b = losses.total_loss(comps, s, epoch)
    assert abs(b.total - (b.l_seg + b.alpha * b.l_reg + b.beta * b.l_def + b.gamma * b.l_com)) < 1e-9
    bumped = losses.total_loss([comps[0], comps[1] + bump, comps[2], comps[3]], s, epoch)
    assert bumped.total - b.total == pytest.approx(s.alpha(epoch) * bump, abs=1e-9)
