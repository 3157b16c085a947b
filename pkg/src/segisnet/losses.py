"""The four joint-objective terms and their weighted sum.

Each term returns its value together with the gradient(s) the trainer needs.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import warp as _warp

DICE_SMOOTH = 1e-7
CLIP_LO = 1e-7
CLIP_HI = 1.0 - 1e-7


@dataclass(frozen=True)
class WeightSchedule:
    alpha0: float = 10.0
    alpha_step: float = 4.0
    alpha_max: float = 100.0
    beta_ratio: float = 0.01
    gamma: float = 1.0

    def alpha(self, epoch: int) -> float:
        if epoch < 0:
            raise ValueError(f"epoch must be non-negative, got {epoch}")
        return float(min(self.alpha0 + self.alpha_step * epoch, self.alpha_max))

    def beta(self, epoch: int) -> float:
        return self.beta_ratio * self.alpha(epoch)

    def weights(self, epoch: int) -> tuple[float, float, float]:
        return self.alpha(epoch), self.beta(epoch), float(self.gamma)


@dataclass(frozen=True)
class LossBreakdown:
    l_seg: float
    l_reg: float
    l_def: float
    l_com: float
    alpha: float
    beta: float
    gamma: float
    total: float

    def as_dict(self):
        return asdict(self)


def soft_dice_loss(pred, truth, eps=DICE_SMOOTH):
    """Negative mean soft Dice over the last (structure) axis.

    Returns ``(loss, grad_wrt_pred)``.
    """
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction {pred.shape} and truth {truth.shape} differ")
    k = pred.shape[-1]
    axes = tuple(range(pred.ndim - 1))
    num = (pred * truth).sum(axis=axes)
    den = (pred * pred).sum(axis=axes) + (truth * truth).sum(axis=axes) + eps
    loss = -(2.0 / k) * float(np.sum(num / den))
    grad = -(2.0 / k) * (truth / den - 2.0 * pred * num / den**2)
    return loss, grad


def soft_dice_per_structure(pred, truth, eps=DICE_SMOOTH) -> np.ndarray:
    """Per-channel negative soft Dice, the summand of :func:`soft_dice_loss`."""
    axes = tuple(range(pred.ndim - 1))
    num = (pred * truth).sum(axis=axes)
    den = (pred * pred).sum(axis=axes) + (truth * truth).sum(axis=axes) + eps
    return -2.0 * num / den


def mse_loss(target, warped):
    """Mean squared intensity error over voxels and channels; grad is wrt ``warped``."""
    target = np.asarray(target)
    warped = np.asarray(warped)
    if target.shape != warped.shape:
        raise ValueError(f"target {target.shape} and warped {warped.shape} differ")
    diff = warped - target
    n = diff.size
    return float(np.sum(diff * diff) / n), (2.0 / n) * diff


def _forward_diffs(u):
    diffs = []
    for axis in range(3):
        d = np.zeros_like(u)
        src = [slice(None)] * u.ndim
        lo = list(src)
        hi = list(src)
        lo[axis] = slice(0, -1)
        hi[axis] = slice(1, None)
        d[tuple(lo)] = u[tuple(hi)] - u[tuple(lo)]
        diffs.append(d)
    return diffs


def smoothness_loss(u):
    """Mean squared forward-difference gradient of a displacement field.

    The trailing slice along each axis contributes zero.  Returns ``(loss, grad)``.
    """
    u = np.asarray(u)
    if u.ndim != 4 or min(u.shape[:3]) < 2:
        raise ValueError(f"smoothness needs a field with every spatial dim >= 2, got {u.shape}")
    n = u.shape[0] * u.shape[1] * u.shape[2]
    grad = np.zeros_like(u)
    total = 0.0
    for axis, d in enumerate(_forward_diffs(u)):
        total += float(np.sum(d * d))
        # d[i] = u[i+1] - u[i] for i < n-1
        lo = [slice(None)] * u.ndim
        hi = list(lo)
        lo[axis] = slice(0, -1)
        hi[axis] = slice(1, None)
        grad[tuple(lo)] -= 2.0 * d[tuple(lo)]
        grad[tuple(hi)] += 2.0 * d[tuple(lo)]
    return total / n, grad / n


def composite_dice_loss(truth_t, pred_s, coords):
    """Soft Dice between target labels and source predictions warped into target space.

    Returns ``(loss, grad_wrt_pred_s, grad_wrt_map, warped_pred)``.
    """
    truth_t = np.asarray(truth_t)
    pred_s = np.asarray(pred_s)
    if truth_t.shape[-1] != pred_s.shape[-1]:
        raise ValueError(f"structure count differs: {truth_t.shape[-1]} vs {pred_s.shape[-1]}")
    if truth_t.shape[:3] != coords.shape[:3]:
        raise ValueError(f"target labels {truth_t.shape} do not match map {coords.shape}")
    warped = _warp.trilinear_warp(pred_s, coords)
    clipped = np.clip(warped, CLIP_LO, CLIP_HI)
    loss, g = soft_dice_loss(clipped, truth_t)
    g = g * ((warped > CLIP_LO) & (warped < CLIP_HI))
    grad_pred, grad_map = _warp.trilinear_warp_grad(pred_s, coords, g)
    return loss, grad_pred, grad_map, warped


def total_loss(components, schedule: WeightSchedule, epoch: int) -> LossBreakdown:
    """Weighted sum ``l_seg + alpha*l_reg + beta*l_def + gamma*l_com`` at ``epoch``."""
    l_seg, l_reg, l_def, l_com = (float(c) for c in components)
    alpha, beta, gamma = schedule.weights(epoch)
    return weighted_total(l_seg, l_reg, l_def, l_com, alpha, beta, gamma)


def weighted_total(l_seg, l_reg, l_def, l_com, alpha, beta, gamma) -> LossBreakdown:
    total = l_seg + alpha * l_reg + beta * l_def + gamma * l_com
    return LossBreakdown(l_seg, l_reg, l_def, l_com, alpha, beta, gamma, total)
