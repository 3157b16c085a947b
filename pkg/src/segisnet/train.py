"""Simultaneous optimization of both streams, plus the independent baselines.

Modes:

* ``joint`` - segmentation and registration parameters updated together on
  ``l_seg + alpha*l_reg + beta*l_def + gamma*l_com``.
* ``seg``   - segmentation stream alone on ``l_seg``.
* ``reg``   - registration stream alone on ``alpha*l_reg + beta*l_def``.

Samples are fed one at a time (batch size 1) in a seeded shuffle that depends
only on ``(seed, epoch)``, so all modes see the same data order.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import losses
from . import warp
from .losses import LossBreakdown, WeightSchedule, weighted_total
from .networks import NetworkParams, UNet, reg_input, save_checkpoint
from .volume import atomic_write_text

log = logging.getLogger(__name__)

MODES = ("joint", "seg", "reg")
DEFAULT_LR = {"joint": 1e-3, "seg": 1e-3, "reg": 1e-4}
TRAIN_LOG_FIELDS = ["epoch", "sample", "l_seg", "l_reg", "l_def", "l_com", "alpha", "beta", "gamma", "total"]
VAL_LOG_FIELDS = ["epoch", "total", "lr", "alpha"]


def default_schedule(mode) -> WeightSchedule:
    if mode == "reg":
        # fixed alpha = 10, beta = 0.01 * alpha for the stand-alone registration net
        return WeightSchedule(alpha0=10.0, alpha_step=0.0, alpha_max=10.0, beta_ratio=0.01, gamma=0.0)
    if mode == "seg":
        return WeightSchedule(alpha0=0.0, alpha_step=0.0, alpha_max=0.0, beta_ratio=0.0, gamma=0.0)
    return WeightSchedule()


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "joint"
    epochs_max: int = 100
    lr0: float | None = None
    decay_factor: float = 0.8
    decay_patience: int = 10
    early_stop_patience: int = 5
    seed: int = 7
    schedule: WeightSchedule | None = None
    cpu_budget_s: float | None = None  # stop once this much process CPU time is spent

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.lr0 is None:
            object.__setattr__(self, "lr0", DEFAULT_LR[self.mode])
        if self.schedule is None:
            object.__setattr__(self, "schedule", default_schedule(self.mode))
        if not self.lr0 > 0:
            raise ValueError("lr0 must be positive")
        if self.decay_patience < 1 or self.early_stop_patience < 1:
            raise ValueError("patience values must be >= 1")
        if self.epochs_max < 1:
            raise ValueError("epochs_max must be >= 1")
        if self.cpu_budget_s is not None and not self.cpu_budget_s > 0:
            raise ValueError("cpu_budget_s must be positive")


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: OptimizerState, lr: float):
    """Bias-corrected Adam update, applied in place; returns ``(params, state)``."""
    for name, g in grads.items():
        if params[name].shape != g.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {params[name].shape}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype, copy=False)
    return params, state


@dataclass
class StepResult:
    breakdown: LossBreakdown
    grad_theta: dict | None = None
    grad_psi: dict | None = None
    pred_s: np.ndarray | None = None
    displacement: np.ndarray | None = None
    coords: np.ndarray | None = None
    warped_img: np.ndarray | None = None
    warped_seg: np.ndarray | None = None


def sample_step(mode, net: NetworkParams, sample, weights, need_grads=True) -> StepResult:
    """One pass of the per-sample body: forward, losses, and (optionally) backward.

    ``weights`` is ``(alpha, beta, gamma)``.  Terms a mode does not use are
    reported as zero with zero weight.
    """
    alpha, beta, gamma = weights
    seg_net = UNet(net.seg_cfg)
    reg_net = UNet(net.reg_cfg)
    res = StepResult(breakdown=None)
    l_seg = l_reg = l_def = l_com = 0.0
    g_pred = g_map = g_u = None

    if mode in ("joint", "seg"):
        pred_s, seg_cache = seg_net.forward(net.theta, sample.seg_img_s)
        l_seg, g_pred = losses.soft_dice_loss(pred_s, sample.seg_s)
        res.pred_s = pred_s
    if mode in ("joint", "reg"):
        aligned = warp.affine_align(sample.img_s, sample.affine)
        u, reg_cache = reg_net.forward(net.psi, reg_input(sample.img_t, aligned))
        coords = warp.compose(sample.affine, u)
        warped_img = warp.trilinear_warp(sample.img_s, coords)
        l_reg, g_warped = losses.mse_loss(sample.img_t, warped_img)
        l_def, g_u = losses.smoothness_loss(u)
        res.displacement, res.coords, res.warped_img = u, coords, warped_img
        if need_grads:
            _, g_map = warp.trilinear_warp_grad(sample.img_s, coords, alpha * g_warped, need_src=False)
            g_u = beta * g_u
    if mode == "joint":
        l_com, g_pred_com, g_map_com, warped_seg = losses.composite_dice_loss(sample.seg_t, pred_s, coords)
        res.warped_seg = warped_seg
        if need_grads:
            g_pred = g_pred + gamma * g_pred_com
            g_map = g_map + gamma * g_map_com

    if mode == "seg":
        alpha = beta = gamma = 0.0
    elif mode == "reg":
        gamma = 0.0
    res.breakdown = weighted_total(l_seg, l_reg, l_def, l_com, alpha, beta, gamma)

    if need_grads:
        if g_pred is not None:
            res.grad_theta = seg_net.backward(net.theta, seg_cache, g_pred.astype(res.pred_s.dtype, copy=False))
        if g_map is not None:
            g_u = g_u + warp.compose_grad(sample.affine, g_map)
            res.grad_psi = reg_net.backward(net.psi, reg_cache, g_u.astype(u.dtype, copy=False))
    return res


def _trainable(mode, net):
    params = {}
    if mode in ("joint", "seg"):
        params.update({f"theta/{k}": v for k, v in net.theta.items()})
    if mode in ("joint", "reg"):
        params.update({f"psi/{k}": v for k, v in net.psi.items()})
    return params


def _flat_grads(res: StepResult):
    g = {}
    if res.grad_theta is not None:
        g.update({f"theta/{k}": v for k, v in res.grad_theta.items()})
    if res.grad_psi is not None:
        g.update({f"psi/{k}": v for k, v in res.grad_psi.items()})
    return g


def mean_breakdown(items) -> LossBreakdown:
    items = list(items)
    vals = {f: float(np.mean([getattr(b, f) for b in items])) for f in ("l_seg", "l_reg", "l_def", "l_com")}
    a, b, g = items[0].alpha, items[0].beta, items[0].gamma
    return weighted_total(vals["l_seg"], vals["l_reg"], vals["l_def"], vals["l_com"], a, b, g)


def shuffled_order(n, seed, epoch):
    return np.random.default_rng([seed, epoch]).permutation(n)


def train_epoch(dataset, net: NetworkParams, state: OptimizerState, config: TrainConfig, epoch: int, lr: float,
                rows: list | None = None) -> LossBreakdown:
    """Run one shuffled pass with an Adam step after every sample."""
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    weights = config.schedule.weights(epoch)
    params = _trainable(config.mode, net)
    seen = []
    for idx in shuffled_order(len(dataset), config.seed, epoch):
        sample = dataset[idx]
        res = sample_step(config.mode, net, sample, weights)
        adam_step(params, _flat_grads(res), state, lr)
        seen.append(res.breakdown)
        if rows is not None:
            rows.append({"epoch": epoch, "sample": sample.subject, **_row(res.breakdown)})
    return mean_breakdown(seen)


def _row(b: LossBreakdown):
    return {k: v for k, v in asdict(b).items()}


def validation_loss(dataset, net, config: TrainConfig, epoch: int) -> LossBreakdown:
    weights = config.schedule.weights(epoch)
    return mean_breakdown(sample_step(config.mode, net, s, weights, need_grads=False).breakdown for s in dataset)


def lr_decay_check(history, lr, config: TrainConfig) -> float:
    """Multiply ``lr`` by the decay factor each time ``decay_patience`` epochs pass without a new best."""
    if not history:
        return lr
    best = int(np.argmin(history))
    since = len(history) - 1 - best
    if since > 0 and since % config.decay_patience == 0:
        return lr * config.decay_factor
    return lr


def consecutive_increases(history) -> int:
    n = 0
    for i in range(len(history) - 1, 0, -1):
        if history[i] > history[i - 1]:
            n += 1
        else:
            break
    return n


def should_stop(history, config: TrainConfig) -> bool:
    return consecutive_increases(history) >= config.early_stop_patience


def early_stop_and_select(history, checkpoints, patience=5):
    """Replay a validation history: where training stops and which checkpoint wins.

    Returns ``(stop_index, best_index, checkpoints[best_index])``; only epochs
    up to the stop point are eligible.
    """
    if not history:
        raise ValueError("need at least one completed epoch")
    stop = len(history) - 1
    for e in range(len(history)):
        if consecutive_increases(history[: e + 1]) >= patience:
            stop = e
            break
    best = int(np.argmin(history[: stop + 1]))
    return stop, best, checkpoints[best]


def check_splits(*splits):
    """Raise if any subject identifier appears in more than one split."""
    owner = {}
    for i, split in enumerate(splits):
        for s in split:
            if owner.setdefault(s.subject, i) != i:
                raise ValueError(f"subject {s.subject} appears in more than one split")


@dataclass
class TrainResult:
    best: NetworkParams
    last: NetworkParams
    best_epoch: int
    best_val: float
    stop_reason: str
    epochs_run: int
    train_rows: list
    val_rows: list
    val_history: list
    val_components: list = field(default_factory=list)

    def summary(self):
        return {
            "best_epoch": self.best_epoch,
            "best_val_loss": self.best_val,
            "stop_reason": self.stop_reason,
            "epochs_run": self.epochs_run,
        }


def rescore(components, weights) -> list[float]:
    """Validation totals of every past epoch re-weighted with ``weights``.

    While alpha ramps up, each epoch's own total carries a larger weight on
    the registration terms than the one before, so raw totals are not
    comparable.  Re-weighting the logged components with the current
    epoch's weights puts the whole history on one scale.
    """
    a, b, g = weights
    return [weighted_total(c.l_seg, c.l_reg, c.l_def, c.l_com, a, b, g).total for c in components]


def train(config: TrainConfig, train_set, val_set, net: NetworkParams, out_dir=None) -> TrainResult:
    """Train ``net`` in ``config.mode``; keeps the checkpoint with the lowest validation loss.

    Model selection, learning-rate decay and early stopping all read the
    validation history scored at the current epoch's loss weights.
    """
    check_splits(train_set, val_set)
    if not val_set:
        raise ValueError("validation set is empty")
    net = net.copy()
    state = OptimizerState()
    lr = config.lr0
    history, components, snapshots, train_rows, val_rows = [], [], [], [], []
    best_epoch = -1
    stop_reason = "epochs_max"
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    cpu0 = time.process_time()
    for epoch in range(config.epochs_max):
        train_epoch(train_set, net, state, config, epoch, lr, rows=train_rows)
        val = validation_loss(val_set, net, config, epoch)
        history.append(val.total)
        components.append(val)
        snapshots.append(net.copy())
        val_rows.append({"epoch": epoch, "total": val.total, "lr": lr, "alpha": config.schedule.alpha(epoch)})
        log.info("%s epoch %d val %.5f lr %.2e", config.mode, epoch, val.total, lr)
        scored = rescore(components, config.schedule.weights(epoch))
        best_now = int(np.argmin(scored))
        if best_now != best_epoch:
            best_epoch = best_now
            if out is not None:
                save_checkpoint(snapshots[best_epoch], out / "best", epoch=best_epoch, seed=config.seed,
                                extra={"mode": config.mode})
        if out is not None:
            save_checkpoint(net, out / "last", epoch=epoch, seed=config.seed, extra={"mode": config.mode})
        if should_stop(scored, config):
            stop_reason = "early_stop"
            break
        if config.cpu_budget_s is not None and time.process_time() - cpu0 >= config.cpu_budget_s:
            stop_reason = "cpu_budget"
            break
        lr = lr_decay_check(scored, lr, config)

    best_val = scored[best_epoch]
    result = TrainResult(snapshots[best_epoch], net, best_epoch, best_val, stop_reason, len(history),
                         train_rows, val_rows, history, components)
    if out is not None:
        write_logs(result, out)
    return result


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def csv_text(rows, fields):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r[k]) for k in fields})
    return buf.getvalue()


def write_logs(result: TrainResult, out_dir):
    out = Path(out_dir)
    atomic_write_text(out / "train_log.csv", csv_text(result.train_rows, TRAIN_LOG_FIELDS))
    atomic_write_text(out / "val_log.csv", csv_text(result.val_rows, VAL_LOG_FIELDS))
    atomic_write_text(out / "summary.json", json.dumps(result.summary(), indent=2) + "\n")


def with_gamma(config: TrainConfig, gamma: float) -> TrainConfig:
    return replace(config, schedule=replace(config.schedule, gamma=gamma))
