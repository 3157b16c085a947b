"""Longitudinal evaluation metrics and prediction post-processing.

Masks are arrays of shape (X, Y, Z, K); the structure index ``k`` selects a
channel.  Measurement-error and sample-size helpers return percentages.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .warp import trilinear_warp

BINARIZE_AT = 0.5


def _is_binary(a):
    return np.all((a == 0) | (a == 1))


def _channel(a, k):
    a = np.asarray(a)
    return a[..., k] if a.ndim == 4 else a


def dice_coefficient(a, b, k=0) -> float:
    """Hard Dice of channel ``k``; two empty masks score 1."""
    a = _channel(a, k)
    b = _channel(b, k)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    if not (_is_binary(a) and _is_binary(b)):
        raise ValueError("dice_coefficient needs binary masks")
    a = a.astype(bool)
    b = b.astype(bool)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def spatial_correlation(j_t, j_s_warped, literal=False) -> float:
    """Normalized inner product of two density maps.

    The default divides by the L2 norms so a map correlates perfectly with
    itself.  ``literal=True`` divides by the sums of absolute values instead.
    """
    j_t = np.asarray(j_t, dtype=np.float64)
    j_s = np.asarray(j_s_warped, dtype=np.float64)
    if j_t.shape != j_s.shape:
        raise ValueError(f"density maps differ in shape: {j_t.shape} vs {j_s.shape}")
    num = float(np.sum(j_t * j_s))
    if literal:
        den = float(np.sum(np.sqrt(j_t**2))) * float(np.sum(np.sqrt(j_s**2)))
    else:
        den = float(np.sqrt(np.sum(j_t**2))) * float(np.sqrt(np.sum(j_s**2)))
    if den == 0:
        raise ValueError("spatial correlation undefined for a zero-norm map")
    return num / den


def warp_binary(mask, coords):
    """Warp a (probabilistic or binary) mask and re-binarize at 0.5."""
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim == 3:
        return warp_binary(mask[..., None], coords)[..., 0]
    return (trilinear_warp(mask, coords) >= BINARIZE_AT).astype(np.float64)


def stcs(pred_t, pred_s, map_fwd, map_rev, k=0) -> float:
    """Bidirectional Dice between each time-point and the other warped onto it.

    ``map_fwd`` samples source space from target voxels; ``map_rev`` is the
    field predicted with the roles swapped.
    """
    if map_fwd is None or map_rev is None:
        raise ValueError("stcs needs both the forward and the reverse sampling map")
    s_to_t = warp_binary(pred_s, map_fwd)
    t_to_s = warp_binary(pred_t, map_rev)
    return 0.5 * (
        dice_coefficient(np.asarray(pred_t, dtype=np.float64), s_to_t, k)
        + dice_coefficient(np.asarray(pred_s, dtype=np.float64), t_to_s, k)
    )


class DegenerateAgreement(ValueError):
    """Chance agreement equals one, so kappa is undefined."""


def kappa_label(kappa: float) -> str:
    if kappa > 0.80:
        return "almost perfect"
    if kappa > 0.60:
        return "substantial"
    if kappa > 0.40:
        return "moderate"
    if kappa > 0.20:
        return "fair"
    if kappa > 0.0:
        return "slight"
    return "poor"


def cohens_kappa(s_t, s_s_warped, k=0, mask=None) -> float:
    """Voxel-wise chance-corrected agreement over the target grid (or ``mask``)."""
    a = _channel(s_t, k).astype(bool)
    b = _channel(s_s_warped, k).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        a, b = a[m], b[m]
    n = a.size
    n_a = int(a.sum())
    n_b = int(b.sum())
    both = int(np.logical_and(a, b).sum())
    neither = int(np.logical_and(~a, ~b).sum())
    p_o = (both + neither) / n
    p_e = (n_a * n_b + (n - n_a) * (n - n_b)) / (n * n)
    if p_e >= 1.0:
        raise DegenerateAgreement("both masks are constant over the domain")
    return (p_o - p_e) / (1.0 - p_e)


def measurement_error(m_s, m_t) -> float:
    """Relative scan-rescan difference ``2|m_s - m_t| / (m_s + m_t)`` in percent."""
    denom = m_s + m_t
    if denom == 0:
        raise ValueError("measurement error undefined when m_s + m_t = 0")
    return 2.0 * abs(m_s - m_t) / denom * 100.0


@dataclass(frozen=True)
class SampleSizeInput:
    sigma_sq_i: float
    sigma_sq_j: float
    rho_i: float
    rho_j: float

    def __post_init__(self):
        if self.sigma_sq_i <= 0 or self.sigma_sq_j <= 0:
            raise ValueError("variances must be positive")
        for r in (self.rho_i, self.rho_j):
            if not -1.0 <= r <= 1.0:
                raise ValueError(f"correlation {r} outside [-1, 1]")


def sample_size_percentage(inp: SampleSizeInput) -> float:
    """Sample size needed by pipeline i relative to pipeline j, in percent."""
    if inp.rho_j >= 1.0:
        raise ValueError("pipeline j has perfect scan-rescan correlation; ratio is unbounded")
    return inp.sigma_sq_i * (1.0 - inp.rho_i) / (inp.sigma_sq_j * (1.0 - inp.rho_j)) * 100.0


def rescan_statistics(m_s, m_t) -> tuple[float, float]:
    """Pooled two-session variance and Pearson scan-rescan correlation."""
    m_s = np.asarray(m_s, dtype=np.float64)
    m_t = np.asarray(m_t, dtype=np.float64)
    if m_s.shape != m_t.shape or m_s.size < 2:
        raise ValueError("need at least two paired measurements")
    pooled = np.concatenate([m_s, m_t])
    sigma_sq = float(pooled.var(ddof=1))
    ds = m_s - m_s.mean()
    dt = m_t - m_t.mean()
    den = np.sqrt(np.sum(ds**2) * np.sum(dt**2))
    rho = float(np.sum(ds * dt) / den) if den > 0 else 1.0
    return sigma_sq, min(max(rho, -1.0), 1.0)


def tract_measures(mask, fa, md, spacing_mm=(1.0, 1.0, 1.0)):
    """Volume in ml plus median non-zero FA and MD under a binary mask."""
    mask = np.asarray(mask).astype(bool)
    if mask.ndim == 4:
        mask = mask[..., 0]
    fa = np.asarray(fa)
    md = np.asarray(md)
    fa = fa[..., 0] if fa.ndim == 4 else fa
    md = md[..., 0] if md.ndim == 4 else md
    if fa.shape != mask.shape or md.shape != mask.shape:
        raise ValueError("FA/MD maps must match the mask dims")
    n = int(mask.sum())
    if n == 0:
        raise ValueError("empty mask")
    volume_ml = n * float(np.prod(spacing_mm)) / 1000.0
    fa_vals = fa[mask]
    md_vals = md[mask]
    fa_vals = fa_vals[fa_vals != 0]
    md_vals = md_vals[md_vals != 0]
    if fa_vals.size == 0 or md_vals.size == 0:
        raise ValueError("all FA or MD values under the mask are zero")
    return volume_ml, float(np.median(fa_vals)), float(np.median(md_vals))


_STRUCT_26 = np.ones((3, 3, 3), dtype=bool)
SIDE_NAMES = {"lr": ("right", "left"), "ap": ("posterior", "anterior")}


@dataclass
class Components:
    masks: dict  # side label -> binary mask (X, Y, Z)
    warning: str | None = None


def postprocess_prediction(prob, k=0, semantics="lr") -> Components:
    """Keep the two largest 26-connected components of channel ``k`` and name them.

    ``semantics`` is ``"lr"`` (split by centroid along x; the lower x is
    "right") or ``"ap"`` (split along y; the lower y is "posterior").
    """
    if semantics not in SIDE_NAMES:
        raise ValueError(f"unknown channel semantics {semantics!r}")
    binary = _channel(prob, k) >= BINARIZE_AT
    labelled, n = ndimage.label(binary, structure=_STRUCT_26)
    if n == 0:
        return Components({}, warning="no component found")
    sizes = np.bincount(labelled.ravel())[1:]
    # stable ordering: size descending, then label id
    order = sorted(range(n), key=lambda i: (-sizes[i], i))[:2]
    axis = 0 if semantics == "lr" else 1
    comps = []
    for i in order:
        m = labelled == (i + 1)
        centroid = np.argwhere(m)[:, axis].mean()
        comps.append((centroid, m))
    comps.sort(key=lambda c: c[0])
    names = SIDE_NAMES[semantics]
    if len(comps) == 1:
        # a lone component is named by which half of the axis holds its centroid
        half = (binary.shape[axis] - 1) / 2
        side = names[0] if comps[0][0] <= half else names[1]
        warnings.warn(f"channel {k}: only one component survived", stacklevel=2)
        return Components({side: comps[0][1]}, warning="single component")
    return Components({names[0]: comps[0][1], names[1]: comps[1][1]})
