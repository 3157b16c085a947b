import csv
import io
import math

import numpy as np
import pytest

from segisnet import report, synth, warp
from segisnet.networks import load_checkpoint, NetworkParams
from segisnet.report import Inference


def _read(text):
    return list(csv.DictReader(io.StringIO(text)))


@pytest.fixture(scope="module")
def evaluated(tiny_runs):
    manifest, splits = synth.load_dataset(tiny_runs / "data")
    joint = load_checkpoint(tiny_runs / "joint" / "best")[0]
    seg = load_checkpoint(tiny_runs / "seg" / "best")[0]
    reg = load_checkpoint(tiny_runs / "reg" / "best")[0]
    pipes = {"segis": joint, "cnn": NetworkParams(seg.seg_cfg, reg.reg_cfg, seg.theta, reg.psi)}
    pairs = splits["test"] + splits["val"]
    return report.evaluate(pipes, pairs, manifest["channel_semantics"]), pairs


def test_one_row_per_structure_pipeline_direction(evaluated):
    res, _ = evaluated
    keys = [(r["structure"], r["pipeline"], r["direction"]) for r in res.metric_rows]
    assert len(keys) == len(set(keys)) == 3 * 2 * 2
    assert set(r["direction"] for r in res.metric_rows) == {"forward", "reverse"}


def test_self_sample_size_is_100(evaluated):
    res, _ = evaluated
    for r in res.samplesize_rows:
        if r["pipeline_i"] == r["pipeline_j"] and not math.isnan(r["P_pct"]):
            assert r["P_pct"] == 100.0
    assert len(res.samplesize_rows) == 3 * 3 * 4


def test_sample_size_reciprocal_rows(evaluated):
    res, _ = evaluated
    idx = {(r["measure_kind"], r["structure"], r["pipeline_i"], r["pipeline_j"]): r["P_pct"]
           for r in res.samplesize_rows}
    for (kind, s, i, j), p in idx.items():
        q = idx[(kind, s, j, i)]
        if not (math.isnan(p) or math.isnan(q)):
            assert p * q == pytest.approx(1e4, rel=1e-9)


def test_comparison_flags_winner(evaluated):
    res, _ = evaluated
    assert [r["structure"] for r in res.comparison_rows] == ["tract0", "tract1", "tract2"]
    for r in res.comparison_rows:
        for metric in ("stcs", "kappa"):
            a, b = r[f"{metric}_segis"], r[f"{metric}_cnn"]
            want = "segis" if a > b else "cnn" if b > a else "tie"
            assert r[f"{metric}_winner"] == want
    text = report.format_comparison(res.comparison_rows)
    assert len(text.splitlines()) == 4


def test_stcs_shared_between_directions(evaluated):
    res, _ = evaluated
    for r in res.pair_rows:
        if r["direction"] == "forward":
            twin = [q for q in res.pair_rows if q["pair"] == r["pair"] and q["pipeline"] == r["pipeline"]
                    and q["structure"] == r["structure"] and q["direction"] == "reverse"]
            assert twin[0]["stcs"] == r["stcs"]


def test_registration_rows(evaluated):
    res, pairs = evaluated
    assert [r["pipeline"] for r in res.registration_rows] == ["segis", "cnn"]
    for r in res.registration_rows:
        assert r["ratio"] == pytest.approx(r["endpoint_error_vox"] / r["gt_magnitude_vox"])


def test_write_report_roundtrip(evaluated, tmp_path):
    res, _ = evaluated
    paths = report.write_report(res, tmp_path)
    names = sorted(p.name for p in paths)
    assert names == ["comparison.csv", "metrics.csv", "metrics_by_pair.csv", "registration.csv", "samplesize.csv"]
    rows = _read((tmp_path / "metrics.csv").read_text())
    assert list(rows[0]) == report.METRIC_FIELDS
    assert float(rows[0]["dice"]) == res.metric_rows[0]["dice"]


def test_figures_written(evaluated, tmp_path):
    res, _ = evaluated
    paths = report.write_report(res, tmp_path, figures=True)
    pngs = [p for p in paths if p.suffix == ".png"]
    assert sorted(p.name for p in pngs) == ["dice.png", "kappa.png", "stcs.png"]
    assert all(p.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n" for p in pngs)


def test_no_comparison_without_both_pipelines():
    assert report.comparison_rows([], ["tract0"], ["segis"]) == []
    assert "needs both" in report.format_comparison([])


def test_perfect_inference_scores_one():
    """Ground-truth maps and masks give Dice = STCS = kappa = 1 in both directions."""
    cfg = synth.SynthConfig(dims=(16, 24, 16), max_displacement=0.0, rotation_deg=0.0,
                            translation_vox=0.0, scale_jitter=0.0)
    pair = synth.make_pair(cfg, 1)
    ident = warp.identity_grid(cfg.dims)
    zero = np.zeros(cfg.dims + (3,))
    inf = Inference(pair.seg_s.astype(float), pair.seg_t.astype(float), zero, ident)
    rows, measures = report.pair_metrics(pair, inf, inf, synth.CHANNEL_SEMANTICS)
    for r in rows:
        assert r["dice"] == 1.0 and r["stcs"] == 1.0 and r["kappa"] == 1.0
        assert r["sc"] == pytest.approx(1.0)
    assert len(measures) == 3


def test_cleaned_masks_keep_two_largest():
    prob = np.zeros((20, 8, 8, 1))
    prob[1:5, 1:5, 1:5] = 0.9
    prob[12:16, 1:5, 1:5] = 0.9
    prob[8, 6, 6] = 0.9
    m = report.cleaned_masks(prob, ["lr"])
    assert m.sum() == 128 and m[8, 6, 6, 0] == 0
