"""Central finite-difference checks for every differentiable op.

All checks run in float64.  Elementwise checks compare the full analytic
gradient against central differences and report

    max_i |analytic_i - numeric_i| / max(max_i |numeric_i|, 1e-12)

Network checks use a single random unit direction instead (a directional
derivative probe), which is all a network of this size can afford.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import losses, networks, train, warp
from .networks import NetworkParams
from .synth import SynthPair
from .volume import AffineTransform

H = 1e-4
LOSS_TOL = 1e-4
NETWORK_TOL = 1e-3


@dataclass(frozen=True)
class CheckResult:
    name: str
    seed: int
    rel_error: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.rel_error) and self.rel_error < self.tol)


def numeric_grad(f, x, h=H):
    """Central differences of scalar ``f`` with respect to every element of ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_error(analytic, numeric) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(float(np.abs(numeric).max()), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


def _off_grid(c):
    # keep sample points away from the interpolation kinks at integer coordinates
    frac = c - np.floor(c)
    return np.where(np.minimum(frac, 1 - frac) < 1e-2, c + 0.05, c)


def _random_map(rng, dims, src_dims, spill=0.5):
    hi = np.array(src_dims, dtype=float) - 1
    c = rng.uniform(-spill, 1.0, size=tuple(dims) + (3,)) * (hi + 2 * spill)
    return _off_grid(c)


def _corrupt(g, fault, name):
    if fault is not None and fault == name:
        g = g * 1.05 + 1e-3
    return g


def check_warp_src(rng, fault=None):
    src = rng.normal(size=(5, 6, 4, 2))
    coords = _random_map(rng, (4, 5, 6), src.shape[:3])
    up = rng.normal(size=(4, 5, 6, 2))
    g_src, _ = warp.trilinear_warp_grad(src, coords, up)
    num = numeric_grad(lambda s: float(np.sum(up * warp.trilinear_warp(s, coords))), src)
    return rel_error(_corrupt(g_src, fault, "warp.src"), num)


def check_warp_map(rng, fault=None):
    src = rng.normal(size=(6, 6, 6, 2))
    coords = _random_map(rng, (5, 5, 5), src.shape[:3])
    up = rng.normal(size=(5, 5, 5, 2))
    _, g_map = warp.trilinear_warp_grad(src, coords, up, need_src=False)
    num = numeric_grad(lambda c: float(np.sum(up * warp.trilinear_warp(src, c))), coords)
    return rel_error(_corrupt(g_map, fault, "warp.map"), num)


def check_soft_dice(rng, fault=None):
    pred = rng.uniform(0.05, 0.95, size=(5, 4, 6, 3))
    truth = (rng.uniform(size=pred.shape) > 0.5).astype(float)
    _, g = losses.soft_dice_loss(pred, truth)
    num = numeric_grad(lambda p: losses.soft_dice_loss(p, truth)[0], pred)
    return rel_error(_corrupt(g, fault, "loss.soft_dice"), num)


def check_mse(rng, fault=None):
    target = rng.normal(size=(4, 5, 6, 1))
    warped = rng.normal(size=target.shape)
    _, g = losses.mse_loss(target, warped)
    num = numeric_grad(lambda w: losses.mse_loss(target, w)[0], warped)
    return rel_error(_corrupt(g, fault, "loss.mse"), num)


def check_smoothness(rng, fault=None):
    u = rng.normal(size=(5, 4, 6, 3))
    _, g = losses.smoothness_loss(u)
    num = numeric_grad(lambda v: losses.smoothness_loss(v)[0], u)
    return rel_error(_corrupt(g, fault, "loss.smoothness"), num)


def _composite_case(rng):
    pred = rng.uniform(0.05, 0.95, size=(6, 6, 6, 2))
    truth = (rng.uniform(size=(6, 6, 6, 2)) > 0.5).astype(float)
    coords = _random_map(rng, (6, 6, 6), pred.shape[:3])
    return pred, truth, coords


def check_composite_pred(rng, fault=None):
    pred, truth, coords = _composite_case(rng)
    _, g_pred, _, _ = losses.composite_dice_loss(truth, pred, coords)
    num = numeric_grad(lambda p: losses.composite_dice_loss(truth, p, coords)[0], pred)
    return rel_error(_corrupt(g_pred, fault, "loss.composite.pred"), num)


def check_composite_map(rng, fault=None):
    pred, truth, coords = _composite_case(rng)
    _, _, g_map, _ = losses.composite_dice_loss(truth, pred, coords)
    num = numeric_grad(lambda c: losses.composite_dice_loss(truth, pred, c)[0], coords)
    return rel_error(_corrupt(g_map, fault, "loss.composite.map"), num)


def _unit_direction(params, rng):
    d = {k: rng.normal(size=v.shape) for k, v in params.items()}
    norm = np.sqrt(sum(float(np.sum(v * v)) for v in d.values()))
    return {k: v / norm for k, v in d.items()}


def directional_fd(f, h=H, min_h=1e-7):
    """Central difference of ``f(s)`` at ``s = 0`` that avoids straddling kinks.

    Leaky ReLU and max-pooling make the networks piecewise smooth.  If the
    estimates at ``h`` and ``h / 2`` disagree the interval contains a kink,
    so the step shrinks by 10 until they agree (or ``min_h`` is reached).
    """
    while True:
        full = (f(h) - f(-h)) / (2 * h)
        half = (f(h / 2) - f(-h / 2)) / h
        if abs(full - half) <= 1e-6 * max(abs(half), 1e-12) or h / 10 < min_h:
            return half
        h /= 10


def _network_probe(cfg, rng, fault, name, h=H):
    net = networks.UNet(cfg)
    params = networks.init_params(cfg, int(rng.integers(2**31)), dtype=np.float64)
    x = rng.normal(size=(8, 8, 8, cfg.in_channels))
    out, cache = net.forward(params, x)
    w = rng.normal(size=out.shape)
    grads = net.backward(params, cache, w)
    d = _unit_direction(params, rng)

    def f(s):
        shifted = {k: params[k] + s * d[k] for k in params}
        return float(np.sum(w * net.forward(shifted, x)[0]))

    numeric = directional_fd(f, h)
    analytic = _corrupt(sum(float(np.sum(grads[k] * d[k])) for k in params), fault, name)
    return abs(analytic - numeric) / max(abs(numeric), 1e-12)


def check_seg_network(rng, fault=None):
    return _network_probe(networks.seg_config(in_channels=6, n_structures=2), rng, fault, "network.seg")


def check_reg_network(rng, fault=None):
    return _network_probe(networks.reg_config(), rng, fault, "network.reg")


def toy_sample(rng, dims=(8, 8, 8), n_structures=2, subject="toy"):
    """A small random training pair with a mild affine, for end-to-end probes."""
    m = np.eye(4)
    m[:3, :3] += rng.uniform(-0.03, 0.03, size=(3, 3))
    m[:3, 3] = rng.uniform(-0.5, 0.5, size=3)
    img_s = rng.uniform(size=dims + (1,))
    img_t = rng.uniform(size=dims + (1,))
    seg_s = (rng.uniform(size=dims + (n_structures,)) > 0.6).astype(float)
    seg_t = (rng.uniform(size=dims + (n_structures,)) > 0.6).astype(float)
    return SynthPair(
        pair_id=0, subject=subject,
        img_s=img_s, img_t=img_t,
        seg_img_s=rng.normal(size=dims + (6,)), seg_img_t=rng.normal(size=dims + (6,)),
        seg_s=seg_s, seg_t=seg_t, affine=AffineTransform(m),
    )


def toy_network(rng, n_structures=2, dtype=np.float64) -> NetworkParams:
    seg_cfg = networks.seg_config(in_channels=6, n_structures=n_structures)
    return NetworkParams.initialize(seg_cfg, networks.reg_config(), int(rng.integers(2**31)), dtype=dtype)


def check_joint_total(rng, fault=None, h=H):
    """Directional probe of the weighted joint total through both streams."""
    net = toy_network(rng)
    sample = toy_sample(rng)
    weights = (10.0, 0.1, 1.0)
    res = train.sample_step("joint", net, sample, weights)
    d_theta = _unit_direction(net.theta, rng)
    d_psi = _unit_direction(net.psi, rng)
    analytic = sum(float(np.sum(res.grad_theta[k] * d_theta[k])) for k in net.theta)
    analytic += sum(float(np.sum(res.grad_psi[k] * d_psi[k])) for k in net.psi)
    analytic = _corrupt(analytic, fault, "joint.total")

    def f(s):
        moved = NetworkParams(
            net.seg_cfg, net.reg_cfg,
            {k: v + s * d_theta[k] for k, v in net.theta.items()},
            {k: v + s * d_psi[k] for k, v in net.psi.items()},
        )
        return train.sample_step("joint", moved, sample, weights, need_grads=False).breakdown.total

    numeric = directional_fd(f, h)
    return abs(analytic - numeric) / max(abs(numeric), 1e-12)


CHECKS = {
    "warp.src": (check_warp_src, LOSS_TOL),
    "warp.map": (check_warp_map, LOSS_TOL),
    "loss.soft_dice": (check_soft_dice, LOSS_TOL),
    "loss.mse": (check_mse, LOSS_TOL),
    "loss.smoothness": (check_smoothness, LOSS_TOL),
    "loss.composite.pred": (check_composite_pred, LOSS_TOL),
    "loss.composite.map": (check_composite_map, LOSS_TOL),
    "network.seg": (check_seg_network, NETWORK_TOL),
    "network.reg": (check_reg_network, NETWORK_TOL),
    "joint.total": (check_joint_total, NETWORK_TOL),
}


def run_checks(seed=0, reps=1, fault=None, names=None) -> list[CheckResult]:
    """Run every check (or ``names``) for ``reps`` independent seeds.

    ``fault`` names a check whose analytic gradient is deliberately corrupted,
    which lets callers verify that the harness actually catches errors.
    """
    if reps < 1:
        raise ValueError("reps must be >= 1")
    if fault is not None and fault not in CHECKS:
        raise ValueError(f"unknown check {fault!r}")
    names = list(CHECKS) if names is None else list(names)
    seeds = [int(s) for s in np.random.SeedSequence(seed).generate_state(reps)]
    results = []
    for s in seeds:
        for name in names:
            fn, tol = CHECKS[name]
            rng = np.random.default_rng([s, list(CHECKS).index(name)])
            results.append(CheckResult(name, s, fn(rng, fault), tol))
    return results
