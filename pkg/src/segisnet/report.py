"""Bidirectional evaluation of trained pipelines on held-out pairs.

Two pipelines are compared:

* ``segis`` - both streams from one jointly trained checkpoint.
* ``cnn``   - segmentation stream from a seg-only run and registration
  stream from a reg-only run, trained independently.

Every pair is evaluated in both orderings.  Segmentations are post-processed
(two largest components per structure) before any metric is computed.
"""

from __future__ import annotations

import io
import csv
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import metrics, warp
from .networks import NetworkParams, UNet, reg_input
from .volume import atomic_write_text

METRIC_FIELDS = [
    "structure", "pipeline", "direction", "dice", "sc", "stcs", "kappa", "kappa_label",
    "eps_volume_pct", "eps_fa_pct", "eps_md_pct",
]
SAMPLESIZE_FIELDS = ["measure_kind", "structure", "pipeline_i", "pipeline_j", "P_pct"]
COMPARISON_FIELDS = [
    "structure", "stcs_segis", "stcs_cnn", "stcs_winner", "kappa_segis", "kappa_cnn", "kappa_winner",
]
REGISTRATION_FIELDS = ["pipeline", "endpoint_error_vox", "gt_magnitude_vox", "ratio"]
MEASURE_KINDS = ("volume-ml", "median-FA", "median-MD")
DIRECTIONS = ("forward", "reverse")


def structure_names(n):
    return [f"tract{k}" for k in range(n)]


@dataclass
class Inference:
    prob_s: np.ndarray
    prob_t: np.ndarray
    displacement: np.ndarray
    coords: np.ndarray


def infer(net: NetworkParams, pair) -> Inference:
    """Segment both time-points and predict the target-to-source sampling map."""
    seg = UNet(net.seg_cfg)
    reg = UNet(net.reg_cfg)
    prob_s = seg.forward(net.theta, pair.seg_img_s)[0]
    prob_t = seg.forward(net.theta, pair.seg_img_t)[0]
    aligned = warp.affine_align(pair.img_s, pair.affine)
    u = reg.forward(net.psi, reg_input(pair.img_t, aligned))[0]
    coords = warp.compose(pair.affine, u.astype(np.float64))
    return Inference(prob_s, prob_t, u, coords)


def cleaned_masks(prob, semantics):
    """Binary (X, Y, Z, K) masks holding the two largest components of each channel."""
    out = np.zeros(prob.shape, dtype=np.float64)
    for k, sem in enumerate(semantics):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            comps = metrics.postprocess_prediction(prob, k, sem)
        for m in comps.masks.values():
            out[..., k][m] = 1.0
    return out


def _safe(fn, *args, **kw):
    try:
        return float(fn(*args, **kw))
    except ValueError:
        return math.nan


def _measures(mask, fa, md, k):
    try:
        return metrics.tract_measures(mask[..., k], fa, md)
    except ValueError:
        return (math.nan, math.nan, math.nan)


def pair_metrics(pair, inf_fwd: Inference, inf_rev: Inference, semantics, sc_literal=False):
    """Per-structure metric records for one pair, both directions.

    Returns ``(rows, measures)`` where ``measures[k]`` is a tuple of
    (source, target) tract measures used for the sample-size estimate.
    """
    mask_s = cleaned_masks(inf_fwd.prob_s, semantics)
    mask_t = cleaned_masks(inf_fwd.prob_t, semantics)
    rows, measures = [], []
    for k in range(len(semantics)):
        st = _safe(metrics.stcs, mask_t, mask_s, inf_fwd.coords, inf_rev.coords, k)
        m_s = _measures(mask_s, pair.img_s, pair.md_s, k)
        m_t = _measures(mask_t, pair.img_t, pair.md_t, k)
        eps = [_safe(metrics.measurement_error, a, b) for a, b in zip(m_s, m_t)]
        measures.append((m_s, m_t))
        views = {
            # target time-point, source mask, density maps, and the map into source space
            "forward": (pair.seg_t, mask_t, mask_s, pair.density_t, pair.density_s, inf_fwd.coords),
            "reverse": (pair.seg_s, mask_s, mask_t, pair.density_s, pair.density_t, inf_rev.coords),
        }
        for direction, (truth, tgt, src, j_t, j_s, coords) in views.items():
            warped_src = metrics.warp_binary(src[..., k : k + 1], coords)
            j_warped = warp.trilinear_warp(j_s[..., k : k + 1].astype(np.float64), coords)
            kappa = _safe(metrics.cohens_kappa, tgt[..., k], warped_src[..., 0])
            rows.append({
                "structure": k,
                "direction": direction,
                "dice": _safe(metrics.dice_coefficient, tgt, np.asarray(truth, dtype=np.float64), k),
                "sc": _safe(metrics.spatial_correlation, j_t[..., k], j_warped[..., 0], literal=sc_literal),
                "stcs": st,
                "kappa": kappa,
                "eps_volume_pct": eps[0],
                "eps_fa_pct": eps[1],
                "eps_md_pct": eps[2],
            })
    return rows, measures


def endpoint_error(inf: Inference, u_gt):
    err = float(np.linalg.norm(inf.displacement - u_gt, axis=-1).mean())
    mag = float(np.linalg.norm(u_gt, axis=-1).mean())
    return err, mag


@dataclass
class EvalResult:
    metric_rows: list
    samplesize_rows: list
    comparison_rows: list
    registration_rows: list
    pair_rows: list


def _mean(vals):
    vals = [v for v in vals if not math.isnan(v)]
    return float(np.mean(vals)) if vals else math.nan


def evaluate(pipelines: dict, pairs, semantics, sc_literal=False) -> EvalResult:
    """Evaluate ``{name: NetworkParams}`` on ``pairs`` (forward and reverse)."""
    if not pairs:
        raise ValueError("no pairs to evaluate")
    names = structure_names(len(semantics))
    pair_rows = []
    measures = {}
    registration = []
    for pname, net in pipelines.items():
        errs, mags = [], []
        for pair in pairs:
            fwd = infer(net, pair)
            rev = infer(net, pair.reversed())
            rows, meas = pair_metrics(pair, fwd, rev, semantics, sc_literal)
            for r in rows:
                pair_rows.append({"pair": pair.subject, "pipeline": pname, **r})
            measures.setdefault(pname, []).append(meas)
            if pair.u_gt is not None:
                e, m = endpoint_error(fwd, pair.u_gt)
                errs.append(e)
                mags.append(m)
        if errs:
            registration.append({
                "pipeline": pname,
                "endpoint_error_vox": float(np.mean(errs)),
                "gt_magnitude_vox": float(np.mean(mags)),
                "ratio": float(np.mean(errs) / np.mean(mags)),
            })

    metric_rows = []
    for pname in pipelines:
        for k, sname in enumerate(names):
            for direction in DIRECTIONS:
                sel = [r for r in pair_rows if r["pipeline"] == pname and r["structure"] == k
                       and r["direction"] == direction]
                row = {"structure": sname, "pipeline": pname, "direction": direction}
                for f in ("dice", "sc", "stcs", "kappa", "eps_volume_pct", "eps_fa_pct", "eps_md_pct"):
                    row[f] = _mean([r[f] for r in sel])
                row["kappa_label"] = "undefined" if math.isnan(row["kappa"]) else metrics.kappa_label(row["kappa"])
                metric_rows.append({f: row[f] for f in METRIC_FIELDS})

    return EvalResult(
        metric_rows,
        sample_size_rows(measures, names),
        comparison_rows(metric_rows, names, list(pipelines)),
        registration,
        pair_rows,
    )


def _rescan(measures, pname, k, kind_idx):
    m_s = np.array([pm[k][0][kind_idx] for pm in measures[pname]])
    m_t = np.array([pm[k][1][kind_idx] for pm in measures[pname]])
    ok = ~(np.isnan(m_s) | np.isnan(m_t))
    return metrics.rescan_statistics(m_s[ok], m_t[ok])


def sample_size_rows(measures, names):
    rows = []
    pnames = list(measures)
    for kind_idx, kind in enumerate(MEASURE_KINDS):
        for k, sname in enumerate(names):
            stats = {}
            for p in pnames:
                try:
                    stats[p] = _rescan(measures, p, k, kind_idx)
                except ValueError:
                    stats[p] = None
            for pi in pnames:
                for pj in pnames:
                    p_pct = math.nan
                    if stats[pi] is not None and stats[pj] is not None:
                        (si, ri), (sj, rj) = stats[pi], stats[pj]
                        try:
                            p_pct = metrics.sample_size_percentage(metrics.SampleSizeInput(si, sj, ri, rj))
                        except ValueError:
                            p_pct = math.nan
                    rows.append({"measure_kind": kind, "structure": sname, "pipeline_i": pi,
                                 "pipeline_j": pj, "P_pct": p_pct})
    return rows


def _winner(a, b, name_a, name_b):
    if math.isnan(a) or math.isnan(b):
        return "undefined"
    if a > b:
        return name_a
    if b > a:
        return name_b
    return "tie"


def comparison_rows(metric_rows, names, pnames):
    """Joint vs independent STCS and kappa per structure, averaged over directions."""
    if not {"segis", "cnn"} <= set(pnames):
        return []
    rows = []
    for sname in names:
        vals = {}
        for p in ("segis", "cnn"):
            sel = [r for r in metric_rows if r["structure"] == sname and r["pipeline"] == p]
            vals[p] = (_mean([r["stcs"] for r in sel]), _mean([r["kappa"] for r in sel]))
        rows.append({
            "structure": sname,
            "stcs_segis": vals["segis"][0],
            "stcs_cnn": vals["cnn"][0],
            "stcs_winner": _winner(vals["segis"][0], vals["cnn"][0], "segis", "cnn"),
            "kappa_segis": vals["segis"][1],
            "kappa_cnn": vals["cnn"][1],
            "kappa_winner": _winner(vals["segis"][1], vals["cnn"][1], "segis", "cnn"),
        })
    return rows


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def csv_text(rows, fields):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for r in rows:
        w.writerow([_fmt(r[f]) for f in fields])
    return buf.getvalue()


def write_report(result: EvalResult, out_dir, figures=False):
    """Write the CSVs (and optionally PNG charts); returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "metrics.csv": (result.metric_rows, METRIC_FIELDS),
        "samplesize.csv": (result.samplesize_rows, SAMPLESIZE_FIELDS),
        "metrics_by_pair.csv": (result.pair_rows, ["pair", "pipeline"] + [f for f in METRIC_FIELDS
                                                                           if f not in ("pipeline", "kappa_label")]),
        "registration.csv": (result.registration_rows, REGISTRATION_FIELDS),
    }
    if result.comparison_rows:
        files["comparison.csv"] = (result.comparison_rows, COMPARISON_FIELDS)
    written = []
    for name, (rows, fields) in files.items():
        atomic_write_text(out / name, csv_text(rows, fields))
        written.append(out / name)
    if figures:
        written.extend(render_figures(result, out))
    return written


def render_figures(result: EvalResult, out_dir):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    pnames = sorted({r["pipeline"] for r in result.metric_rows})
    snames = sorted({r["structure"] for r in result.metric_rows})
    paths = []
    for metric in ("stcs", "kappa", "dice"):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        width = 0.8 / max(len(pnames), 1)
        x = np.arange(len(snames))
        for i, p in enumerate(pnames):
            vals = [_mean([r[metric] for r in result.metric_rows if r["pipeline"] == p and r["structure"] == s])
                    for s in snames]
            ax.bar(x + i * width - 0.4 + width / 2, vals, width, label=p)
        ax.set_xticks(x)
        ax.set_xticklabels(snames)
        ax.set_ylim(0, 1)
        ax.set_ylabel(metric)
        ax.legend(loc="lower right")
        fig.tight_layout()
        path = out / f"{metric}.png"
        # metadata pinned so reruns produce identical files
        fig.savefig(path, dpi=100, metadata={"Software": None})
        plt.close(fig)
        paths.append(path)
    return paths


def format_comparison(rows) -> str:
    """Plain-text table of the per-structure winners."""
    if not rows:
        return "(comparison needs both the segis and cnn pipelines)"
    lines = [f"{'structure':<10} {'STCS segis':>10} {'STCS cnn':>10} {'winner':>8} "
             f"{'kappa segis':>11} {'kappa cnn':>10} {'winner':>8}"]
    for r in rows:
        lines.append(
            f"{r['structure']:<10} {r['stcs_segis']:>10.4f} {r['stcs_cnn']:>10.4f} {r['stcs_winner']:>8} "
            f"{r['kappa_segis']:>11.4f} {r['kappa_cnn']:>10.4f} {r['kappa_winner']:>8}"
        )
    return "\n".join(lines)
