"""Transform composition and the pull-based trilinear warp layer.

Sampling maps hold absolute source-grid voxel coordinates for every target
voxel, shape ``(X, Y, Z, 3)``.  Coordinates outside ``[0, dim - 1]`` are clamped
to the border before interpolation, so clamped axes carry zero map-gradient.
"""

from __future__ import annotations

import numpy as np

from .volume import AffineTransform


def identity_grid(dims, dtype=np.float64) -> np.ndarray:
    axes = [np.arange(d, dtype=dtype) for d in dims]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def compose(affine: AffineTransform, displacement: np.ndarray) -> np.ndarray:
    """Sampling map ``A @ (x + u(x), 1)`` for each target voxel ``x``."""
    displacement = np.asarray(displacement)
    if displacement.ndim != 4 or displacement.shape[-1] != 3:
        raise ValueError(f"displacement must be (X, Y, Z, 3), got {displacement.shape}")
    dtype = displacement.dtype if displacement.dtype.kind == "f" else np.float64
    pts = identity_grid(displacement.shape[:3], dtype) + displacement
    lin = affine.linear.astype(dtype)
    off = affine.offset.astype(dtype)
    return pts @ lin.T + off


def compose_grad(affine: AffineTransform, grad_map: np.ndarray) -> np.ndarray:
    """Pull a sampling-map gradient back to the displacement field."""
    return grad_map @ affine.linear.astype(grad_map.dtype)


def _corners(coords, shape):
    """Lower corner index, fraction and in-range mask along each axis."""
    lo, frac, inside = [], [], []
    for axis in range(3):
        n = shape[axis]
        c = coords[..., axis]
        cc = np.clip(c, 0, n - 1)
        inside.append((c >= 0) & (c <= n - 1))
        if n == 1:
            i0 = np.zeros(c.shape, dtype=np.intp)
            f = np.zeros_like(cc)
        else:
            i0 = np.minimum(np.floor(cc).astype(np.intp), n - 2)
            f = cc - i0
        lo.append(i0)
        frac.append(f)
    return lo, frac, inside


def _step(shape):
    # 0 on singleton axes, otherwise one voxel
    return [0 if n == 1 else 1 for n in shape]


def trilinear_warp(src: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Sample ``src`` (X', Y', Z', C) at ``coords`` (X, Y, Z, 3)."""
    src = np.asarray(src)
    coords = np.asarray(coords)
    if src.ndim != 4 or coords.ndim != 4 or coords.shape[-1] != 3:
        raise ValueError(f"bad shapes for warp: src {src.shape}, map {coords.shape}")
    (ix, iy, iz), (fx, fy, fz), _ = _corners(coords, src.shape[:3])
    sx, sy, sz = _step(src.shape[:3])
    fx, fy, fz = fx[..., None], fy[..., None], fz[..., None]
    c00 = src[ix, iy, iz] * (1 - fx) + src[ix + sx, iy, iz] * fx
    c10 = src[ix, iy + sy, iz] * (1 - fx) + src[ix + sx, iy + sy, iz] * fx
    c01 = src[ix, iy, iz + sz] * (1 - fx) + src[ix + sx, iy, iz + sz] * fx
    c11 = src[ix, iy + sy, iz + sz] * (1 - fx) + src[ix + sx, iy + sy, iz + sz] * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    return c0 * (1 - fz) + c1 * fz


def trilinear_warp_grad(src: np.ndarray, coords: np.ndarray, upstream: np.ndarray, need_src=True):
    """Gradients of ``sum(upstream * trilinear_warp(src, coords))``.

    Returns ``(grad_src, grad_map)`` shaped like ``src`` and ``coords``;
    ``grad_src`` is None when ``need_src`` is false.
    """
    src = np.asarray(src)
    coords = np.asarray(coords)
    upstream = np.asarray(upstream)
    expected = coords.shape[:3] + (src.shape[-1],)
    if upstream.shape != expected:
        raise ValueError(f"upstream shape {upstream.shape} does not match warp output {expected}")
    shape = src.shape[:3]
    (ix, iy, iz), (fx, fy, fz), inside = _corners(coords, shape)
    sx, sy, sz = _step(shape)
    n_channels = src.shape[-1]

    wx = (1 - fx, fx)
    wy = (1 - fy, fy)
    wz = (1 - fz, fz)
    grad_src = None
    if need_src:
        grad_src = np.zeros(src.shape, dtype=np.result_type(src, upstream))
        flat = grad_src.reshape(-1, n_channels)
        n_src = flat.shape[0]
        g_flat = upstream.reshape(-1, n_channels)
        for a, dx in enumerate((0, sx)):
            for b, dy in enumerate((0, sy)):
                for c, dz in enumerate((0, sz)):
                    idx = np.ravel_multi_index((ix + dx, iy + dy, iz + dz), shape).reshape(-1)
                    w = (wx[a] * wy[b] * wz[c]).reshape(-1, 1)
                    contrib = g_flat * w
                    for ch in range(n_channels):
                        flat[:, ch] += np.bincount(idx, weights=contrib[:, ch], minlength=n_src)

    v = {}
    for dx in (0, sx):
        for dy in (0, sy):
            for dz in (0, sz):
                v[dx, dy, dz] = src[ix + dx, iy + dy, iz + dz]
    fx_, fy_, fz_ = fx[..., None], fy[..., None], fz[..., None]

    def lerp(p, q, t):
        return p * (1 - t) + q * t

    # derivative along x: difference of x-neighbours, interpolated in y and z
    dx_ = lerp(
        lerp(v[sx, 0, 0] - v[0, 0, 0], v[sx, sy, 0] - v[0, sy, 0], fy_),
        lerp(v[sx, 0, sz] - v[0, 0, sz], v[sx, sy, sz] - v[0, sy, sz], fy_),
        fz_,
    )
    dy_ = lerp(
        lerp(v[0, sy, 0] - v[0, 0, 0], v[sx, sy, 0] - v[sx, 0, 0], fx_),
        lerp(v[0, sy, sz] - v[0, 0, sz], v[sx, sy, sz] - v[sx, 0, sz], fx_),
        fz_,
    )
    dz_ = lerp(
        lerp(v[0, 0, sz] - v[0, 0, 0], v[sx, 0, sz] - v[sx, 0, 0], fx_),
        lerp(v[0, sy, sz] - v[0, sy, 0], v[sx, sy, sz] - v[sx, sy, 0], fx_),
        fy_,
    )
    grad_map = np.stack(
        [(upstream * d).sum(axis=-1) * m for d, m in zip((dx_, dy_, dz_), inside)], axis=-1
    )
    for axis, n in enumerate(shape):
        if n == 1:
            grad_map[..., axis] = 0
    return grad_src, grad_map.astype(coords.dtype if coords.dtype.kind == "f" else grad_map.dtype)


def affine_align(src: np.ndarray, affine: AffineTransform) -> np.ndarray:
    """Resample ``src`` through the affine alone (registration-stream input only)."""
    zero = np.zeros(src.shape[:3] + (3,), dtype=src.dtype if src.dtype.kind == "f" else np.float64)
    return trilinear_warp(src, compose(affine, zero))
