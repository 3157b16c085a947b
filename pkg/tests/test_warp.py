import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from segisnet import gradcheck, warp
from segisnet.volume import AffineTransform


def _oracle_sample(src, p):
    """Loop trilinear interpolation with border clamping, written independently."""
    dims = src.shape[:3]
    q = [min(max(p[a], 0.0), dims[a] - 1.0) for a in range(3)]
    out = np.zeros(src.shape[-1])
    lo = [int(np.floor(v)) for v in q]
    for corner in range(8):
        w = 1.0
        idx = []
        for a in range(3):
            bit = (corner >> a) & 1
            i = min(lo[a] + bit, dims[a] - 1)
            f = q[a] - lo[a]
            w *= f if bit else (1 - f)
            idx.append(i)
        out += w * src[idx[0], idx[1], idx[2]]
    return out


def test_compose_identity_zero_is_identity_map():
    m = warp.compose(AffineTransform.identity(), np.zeros((3, 4, 5, 3)))
    assert np.array_equal(m, warp.identity_grid((3, 4, 5)))


def test_compose_identity_drops_affine():
    u = np.random.default_rng(0).normal(size=(3, 4, 5, 3))
    assert np.array_equal(warp.compose(AffineTransform.identity(), u), warp.identity_grid((3, 4, 5)) + u)


def test_compose_translation():
    t = np.array([1.5, -2.0, 0.25])
    m = warp.compose(AffineTransform.translation(t), np.zeros((2, 3, 4, 3)))
    assert np.allclose(m, warp.identity_grid((2, 3, 4)) + t)


def test_compose_general_affine_matches_hand_multiply():
    rng = np.random.default_rng(1)
    mat = np.eye(4)
    mat[:3, :4] += rng.normal(scale=0.1, size=(3, 4))
    u = rng.normal(size=(2, 2, 2, 3))
    out = warp.compose(AffineTransform(mat), u)
    x = np.array([1, 0, 1]) + u[1, 0, 1]
    assert np.allclose(out[1, 0, 1], mat[:3, :3] @ x + mat[:3, 3])


def test_compose_rejects_bad_field():
    with pytest.raises(ValueError):
        warp.compose(AffineTransform.identity(), np.zeros((3, 3, 3, 2)))


def test_identity_warp_is_exact():
    src = np.random.default_rng(2).normal(size=(4, 5, 6, 3))
    out = warp.trilinear_warp(src, warp.identity_grid((4, 5, 6)))
    assert np.array_equal(out, src)


def test_integer_shift():
    src = np.random.default_rng(3).normal(size=(6, 5, 4, 2))
    coords = warp.identity_grid((6, 5, 4)) + np.array([1.0, 0.0, 0.0])
    out = warp.trilinear_warp(src, coords)
    assert np.array_equal(out[:-1], src[1:])
    # clamped to the border on the last slice
    assert np.array_equal(out[-1], src[-1])


def test_half_voxel_shift_on_ramp():
    x = np.arange(6, dtype=float)
    src = np.broadcast_to(x[:, None, None, None], (6, 3, 3, 1)).copy()
    coords = warp.identity_grid((6, 3, 3)) + np.array([0.5, 0.0, 0.0])
    out = warp.trilinear_warp(src, coords)
    assert np.allclose(out[:-1, ..., 0], (x[:-1] + 0.5)[:, None, None])


def test_warp_matches_loop_oracle():
    rng = np.random.default_rng(4)
    for _ in range(10):
        src = rng.normal(size=(4, 5, 3, 2))
        coords = rng.uniform(-1.5, 6.0, size=(3, 3, 3, 3))
        out = warp.trilinear_warp(src, coords)
        for idx in np.ndindex(3, 3, 3):
            assert np.allclose(out[idx], _oracle_sample(src, coords[idx]), atol=1e-12)


def test_singleton_axis():
    src = np.random.default_rng(5).normal(size=(4, 4, 1, 1))
    coords = warp.identity_grid((4, 4, 1)) + np.array([0.25, 0.0, 0.7])
    out = warp.trilinear_warp(src, coords)
    _, g_map = warp.trilinear_warp_grad(src, coords, np.ones_like(out))
    assert np.all(g_map[..., 2] == 0)


def test_grad_identity_ones_upstream():
    src = np.random.default_rng(6).normal(size=(5, 5, 5, 1))
    coords = warp.identity_grid((5, 5, 5))
    g_src, _ = warp.trilinear_warp_grad(src, coords, np.ones((5, 5, 5, 1)))
    assert np.allclose(g_src[1:-1, 1:-1, 1:-1], 1.0)


def test_grad_constant_src_zero_map_grad():
    src = np.full((5, 4, 6, 2), 3.7)
    coords = np.random.default_rng(7).uniform(-1, 6, size=(4, 4, 4, 3))
    _, g_map = warp.trilinear_warp_grad(src, coords, np.random.default_rng(8).normal(size=(4, 4, 4, 2)))
    assert np.all(g_map == 0)


def test_clamped_axes_get_zero_map_grad():
    rng = np.random.default_rng(9)
    src = rng.normal(size=(4, 4, 4, 1))
    coords = rng.uniform(0.2, 2.8, size=(3, 3, 3, 3))
    coords[..., 0] = -2.0
    _, g_map = warp.trilinear_warp_grad(src, coords, rng.normal(size=(3, 3, 3, 1)))
    assert np.all(g_map[..., 0] == 0)
    assert np.any(g_map[..., 1] != 0)


@pytest.mark.parametrize("check", [gradcheck.check_warp_src, gradcheck.check_warp_map])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_warp_gradients_match_finite_differences(check, seed):
    assert check(np.random.default_rng(seed)) < 1e-4


def test_grad_upstream_shape_checked():
    src = np.zeros((3, 3, 3, 2))
    with pytest.raises(ValueError):
        warp.trilinear_warp_grad(src, warp.identity_grid((3, 3, 3)), np.zeros((3, 3, 3, 1)))


def test_affine_align():
    src = np.random.default_rng(10).normal(size=(6, 4, 4, 1))
    assert np.array_equal(warp.affine_align(src, AffineTransform.identity()), src)
    shifted = warp.affine_align(src, AffineTransform.translation([2.0, 0.0, 0.0]))
    assert np.array_equal(shifted[:-2], src[2:])


def test_composite_differs_from_two_step_warp():
    rng = np.random.default_rng(11)
    src = rng.normal(size=(8, 8, 8, 1))
    a = AffineTransform.translation([0.4, -0.3, 0.2])
    u = rng.normal(scale=0.6, size=(8, 8, 8, 3))
    once = warp.trilinear_warp(src, warp.compose(a, u))
    twice = warp.trilinear_warp(warp.affine_align(src, a), warp.identity_grid((8, 8, 8)) + u)
    assert not np.allclose(once, twice)
    zero = np.zeros_like(u)
    assert np.array_equal(
        warp.trilinear_warp(src, warp.compose(a, zero)),
        warp.trilinear_warp(warp.affine_align(src, a), warp.identity_grid((8, 8, 8))),
    )


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_warp_preserves_probability_bounds(seed):
    rng = np.random.default_rng(seed)
    src = rng.uniform(size=(4, 5, 3, 2))
    coords = rng.uniform(-3, 8, size=(3, 4, 2, 3))
    out = warp.trilinear_warp(src, coords)
    assert out.min() >= 0 and out.max() <= 1


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_warp_is_linear_in_source(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(2, 4, 4, 4, 1))
    coords = rng.uniform(-1, 4, size=(3, 3, 3, 3))
    lhs = warp.trilinear_warp(2 * a - b, coords)
    rhs = 2 * warp.trilinear_warp(a, coords) - warp.trilinear_warp(b, coords)
    assert np.allclose(lhs, rhs, atol=1e-12)
