"""Differentiable primitives on single-sample feature maps of shape (X, Y, Z, C).

Every ``*_forward`` returns ``(output, cache)`` and the matching ``*_backward``
consumes that cache plus the upstream gradient.
"""

from __future__ import annotations

import numpy as np

LEAKY_SLOPE = 0.2
NORM_EPS = 1e-5


def glorot_limit(kernel_shape) -> float:
    *spatial, c_in, c_out = kernel_shape
    receptive = int(np.prod(spatial)) if spatial else 1
    return float(np.sqrt(6.0 / (receptive * c_in + receptive * c_out)))


def glorot_uniform(kernel_shape, rng: np.random.Generator, dtype=np.float64) -> np.ndarray:
    """Uniform(-L, L) kernels with L = sqrt(6 / (fan_in + fan_out))."""
    if any(int(s) < 1 for s in kernel_shape):
        raise ValueError(f"kernel dims must be positive, got {kernel_shape}")
    limit = glorot_limit(kernel_shape)
    return rng.uniform(-limit, limit, size=tuple(kernel_shape)).astype(dtype)


def _shifted_rows(shape):
    """Flat-row offsets of the 27 taps and the number of base rows to evaluate.

    With the zero-padded input flattened to rows, output voxel (x, y, z) reads
    tap (i, j, l) from row ``base(x, y, z) + offset(i, j, l)``, so every tap is
    a contiguous slice of the flattened array and needs no copy.
    """
    X, Y, Z = shape[:3]
    Yp, Zp = Y + 2, Z + 2
    offsets = [i * Yp * Zp + j * Zp + l for i in range(3) for j in range(3) for l in range(3)]
    n_rows = (X - 1) * Yp * Zp + (Y - 1) * Zp + Z
    return offsets, n_rows


def conv3_forward(x, kernel, bias):
    """Same-size cross-correlation with zero padding; kernel is (k, k, k, C_in, C_out), k in {1, 3}."""
    k = kernel.shape[0]
    c_in, c_out = kernel.shape[-2:]
    if x.shape[-1] != c_in:
        raise ValueError(f"conv expects {c_in} input channels, got {x.shape[-1]}")
    if k == 1:
        y = x.reshape(-1, c_in) @ kernel.reshape(c_in, c_out) + bias
        return y.reshape(x.shape[:3] + (c_out,)), (x, kernel)
    X, Y, Z = x.shape[:3]
    padded = np.pad(x, ((1, 1), (1, 1), (1, 1), (0, 0))).reshape(-1, c_in)
    offsets, n_rows = _shifted_rows(x.shape)
    taps = kernel.reshape(27, c_in, c_out)
    out = np.zeros(((X + 2) * (Y + 2) * (Z + 2), c_out), dtype=np.result_type(x, kernel))
    acc = out[:n_rows]
    for off, w in zip(offsets, taps):
        acc += padded[off : off + n_rows] @ w
    y = out.reshape(X + 2, Y + 2, Z + 2, c_out)[:X, :Y, :Z] + bias
    return y, (padded, x.shape, kernel)


def conv3_backward(cache, dy):
    """Return ``(dx, dkernel, dbias)`` for the cached :func:`conv3_forward` call."""
    if len(cache) == 2:
        x, kernel = cache
        c_in, c_out = kernel.shape[-2:]
        dy2 = dy.reshape(-1, c_out)
        dkernel = (x.reshape(-1, c_in).T @ dy2).reshape(kernel.shape)
        dx = (dy2 @ kernel.reshape(c_in, c_out).T).reshape(x.shape)
        return dx, dkernel, dy2.sum(axis=0)
    padded, x_shape, kernel = cache
    X, Y, Z, c_in = x_shape
    c_out = kernel.shape[-1]
    offsets, n_rows = _shifted_rows(x_shape)
    full = np.zeros((X + 2, Y + 2, Z + 2, c_out), dtype=dy.dtype)
    full[:X, :Y, :Z] = dy
    full = full.reshape(-1, c_out)[:n_rows]
    taps = kernel.reshape(27, c_in, c_out)
    dtaps = np.empty_like(taps)
    dpad = np.zeros_like(padded)
    for t, (off, w) in enumerate(zip(offsets, taps)):
        rows = padded[off : off + n_rows]
        dtaps[t] = rows.T @ full
        dpad[off : off + n_rows] += full @ w.T
    dx = dpad.reshape(X + 2, Y + 2, Z + 2, c_in)[1:-1, 1:-1, 1:-1]
    return dx, dtaps.reshape(kernel.shape), dy.reshape(-1, c_out).sum(axis=0)


def conv3(x, kernel, bias):
    return conv3_forward(x, kernel, bias)[0]


def instance_norm_forward(x, scale, shift, eps=NORM_EPS):
    axes = (0, 1, 2)
    mean = x.mean(axis=axes)
    var = x.var(axis=axes)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    return scale * xhat + shift, (xhat, inv_std, scale)


def instance_norm_backward(cache, dy):
    xhat, inv_std, scale = cache
    axes = (0, 1, 2)
    n = xhat.shape[0] * xhat.shape[1] * xhat.shape[2]
    dscale = (dy * xhat).sum(axis=axes)
    dshift = dy.sum(axis=axes)
    dxhat = dy * scale
    dx = inv_std / n * (n * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
    return dx, dscale, dshift


def instance_norm(x, scale, shift):
    return instance_norm_forward(x, scale, shift)[0]


def leaky_relu(x, slope=LEAKY_SLOPE):
    return np.where(x > 0, x, slope * x)


def leaky_relu_backward(x, dy, slope=LEAKY_SLOPE):
    return np.where(x > 0, dy, slope * dy)


def sigmoid(x):
    x = np.asarray(x)
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def maxpool2_forward(x):
    X, Y, Z, C = x.shape
    if X % 2 or Y % 2 or Z % 2:
        raise ValueError(f"maxpool2 needs even spatial dims, got {x.shape[:3]}")
    w = x.reshape(X // 2, 2, Y // 2, 2, Z // 2, 2, C).transpose(0, 2, 4, 6, 1, 3, 5)
    w = w.reshape(X // 2, Y // 2, Z // 2, C, 8)
    arg = w.argmax(axis=-1)
    out = np.take_along_axis(w, arg[..., None], axis=-1)[..., 0]
    return out, (arg, x.shape)


def maxpool2_backward(cache, dy):
    arg, shape = cache
    X, Y, Z, C = shape
    dw = np.zeros(dy.shape + (8,), dtype=dy.dtype)
    np.put_along_axis(dw, arg[..., None], dy[..., None], axis=-1)
    dw = dw.reshape(X // 2, Y // 2, Z // 2, C, 2, 2, 2).transpose(0, 4, 1, 5, 2, 6, 3)
    return dw.reshape(shape)


def maxpool2(x):
    return maxpool2_forward(x)[0]


def _up_axis(x, axis):
    # out[2i] = 0.75 x[i] + 0.25 x[i-1], out[2i+1] = 0.75 x[i] + 0.25 x[i+1], edges clamped
    x = np.moveaxis(x, axis, 0)
    prev = np.concatenate([x[:1], x[:-1]], axis=0)
    nxt = np.concatenate([x[1:], x[-1:]], axis=0)
    out = np.empty((2 * x.shape[0],) + x.shape[1:], dtype=x.dtype)
    out[0::2] = 0.75 * x + 0.25 * prev
    out[1::2] = 0.75 * x + 0.25 * nxt
    return np.moveaxis(out, 0, axis)


def _up_axis_backward(dy, axis):
    dy = np.moveaxis(dy, axis, 0)
    even, odd = dy[0::2], dy[1::2]
    dx = 0.75 * (even + odd)
    # prev[i] = x[i-1] (x[0] at i=0); nxt[i] = x[i+1] (x[-1] at the end)
    dx[:-1] += 0.25 * even[1:]
    dx[0] += 0.25 * even[0]
    dx[1:] += 0.25 * odd[:-1]
    dx[-1] += 0.25 * odd[-1]
    return np.moveaxis(dx, 0, axis)


def upsample2(x):
    """Double each spatial dim by separable linear interpolation (half-voxel aligned)."""
    for axis in range(3):
        x = _up_axis(x, axis)
    return x


def upsample2_backward(dy):
    for axis in (2, 1, 0):
        dy = _up_axis_backward(dy, axis)
    return dy
