import json

import pytest

from segisnet import cli


def _run(args, capsys):
    rc = cli.main(args)
    out = capsys.readouterr()
    return rc, out.out, out.err


def _eval_args(root, out):
    return ["eval", "--config", str(root / "config.json"), "--data", str(root / "data"),
            "--joint", str(root / "joint"), "--seg", str(root / "seg"), "--reg", str(root / "reg"),
            "--out", str(out)]


def test_synth_writes_manifest(tiny_runs):
    manifest = json.loads((tiny_runs / "data" / "manifest.json").read_text())
    assert manifest["n_pairs"] == 6
    assert len({e["seed"] for e in manifest["pairs"]}) == 6
    echo = json.loads((tiny_runs / "data" / "resolved_config.json").read_text())
    assert echo["command"] == "synth" and echo["seed"] == 3 and echo["pairs"] == 6


def test_synth_rerun_identical(tiny_runs, tmp_path, capsys):
    rc, out, _ = _run(["synth", "--config", str(tiny_runs / "config.json"), "--out", str(tmp_path / "d")], capsys)
    assert rc == 0 and "manifest:" in out
    for f in (tiny_runs / "data").rglob("*"):
        if f.is_file():
            twin = tmp_path / "d" / f.relative_to(tiny_runs / "data")
            text = f.read_bytes()
            if f.name == "resolved_config.json":
                text = text.replace(str(tiny_runs / "data").encode(), str(tmp_path / "d").encode())
            assert twin.read_bytes() == text, f.name


def test_train_outputs(tiny_runs):
    for mode in ("joint", "seg", "reg"):
        d = tiny_runs / mode
        for f in ("train_log.csv", "val_log.csv", "summary.json", "best.json", "last.json"):
            assert (d / f).exists(), (mode, f)
        assert json.loads((d / "summary.json").read_text())["epochs_run"] == 2


def test_train_logs_reproducible(tiny_runs, tmp_path, capsys):
    rc, out, _ = _run(["train", "--config", str(tiny_runs / "config.json"), "--data", str(tiny_runs / "data"),
                       "--mode", "seg", "--out", str(tmp_path / "seg")], capsys)
    assert rc == 0 and "best_epoch" in out
    for f in ("train_log.csv", "val_log.csv", "summary.json"):
        assert (tmp_path / "seg" / f).read_bytes() == (tiny_runs / "seg" / f).read_bytes()


def test_eval_reports(tiny_runs, tmp_path, capsys):
    rc, out, _ = _run(_eval_args(tiny_runs, tmp_path / "a") + ["--figures"], capsys)
    assert rc == 0
    assert "STCS segis" in out
    for f in ("metrics.csv", "samplesize.csv", "comparison.csv", "registration.csv", "stcs.png"):
        assert (tmp_path / "a" / f).exists()
    rc, _, _ = _run(_eval_args(tiny_runs, tmp_path / "b") + ["--figures"], capsys)
    assert rc == 0
    for f in ("metrics.csv", "samplesize.csv", "comparison.csv", "metrics_by_pair.csv", "registration.csv",
              "stcs.png", "kappa.png", "dice.png"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f


def test_eval_default_has_no_figures(tiny_runs, tmp_path, capsys):
    assert _run(_eval_args(tiny_runs, tmp_path), capsys)[0] == 0
    assert not list(tmp_path.glob("*.png"))


@pytest.mark.parametrize("args", [
    ["synth", "--pairs", "0"],
    ["synth", "--pairs", "-3"],
    ["train", "--mode", "both"],
    ["gradcheck", "--reps", "0"],
    ["gradcheck", "--inject-fault", "nonsense"],
    ["frobnicate"],
    [],
    ["synth", "--seed", "-1"],
])
def test_usage_errors(args, tmp_path, capsys):
    rc, _, err = _run(args + ["--out", str(tmp_path)] if args else args, capsys)
    assert rc == cli.EXIT_USAGE
    assert "error" in err


def test_config_unknown_keys(tmp_path, capsys):
    for body in ({"bogus": 1}, {"synth": {"colour": "red"}}, {"train": []}):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps(body))
        rc, _, err = _run(["synth", "--config", str(cfg), "--out", str(tmp_path / "o")], capsys)
        assert rc == cli.EXIT_USAGE and "error" in err
    rc, _, _ = _run(["synth", "--config", str(tmp_path / "missing.json")], capsys)
    assert rc == cli.EXIT_USAGE


def test_config_mode_validated(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"train": {"mode": "both"}}))
    rc, _, _ = _run(["train", "--config", str(cfg), "--out", str(tmp_path / "o")], capsys)
    assert rc == cli.EXIT_USAGE


def test_flags_override_file(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"seed": 5, "train": {"mode": "reg", "epochs_max": 4}}))
    args = cli.build_parser().parse_args(["train", "--config", str(cfg), "--epochs", "9"])
    r = cli.resolve(args)
    assert (r["seed"], r["mode"], r["epochs_max"], r["out"]) == (5, "reg", 9, "runs/reg")
    r = cli.resolve(cli.build_parser().parse_args(["train", "--config", str(cfg), "--seed", "11"]))
    assert r["seed"] == 11 and r["epochs_max"] == 4
    r = cli.resolve(cli.build_parser().parse_args(["gradcheck"]))
    assert r["seed"] == cli.DEFAULT_SEED


def test_missing_data(tmp_path, capsys):
    rc, _, err = _run(["train", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "o")], capsys)
    assert rc == cli.EXIT_DATA and "data error" in err


def test_missing_checkpoint(tiny_runs, tmp_path, capsys):
    rc, _, _ = _run(["eval", "--data", str(tiny_runs / "data"), "--joint", str(tmp_path / "none"),
                     "--out", str(tmp_path / "o")], capsys)
    assert rc == cli.EXIT_DATA


def test_eval_needs_both_baseline_streams(tiny_runs, tmp_path, capsys):
    rc, _, _ = _run(["eval", "--data", str(tiny_runs / "data"), "--seg", str(tiny_runs / "seg"),
                     "--out", str(tmp_path)], capsys)
    assert rc == cli.EXIT_USAGE


def test_gradcheck_pass_and_fault(tmp_path, capsys):
    rc, out, _ = _run(["gradcheck", "--out", str(tmp_path / "a")], capsys)
    assert rc == cli.EXIT_OK
    lines = (tmp_path / "a" / "gradcheck.csv").read_text().splitlines()
    assert lines[0] == "check,seed,rel_error,tol,status" and len(lines) == 11
    assert all(line.endswith(",pass") for line in lines[1:])
    rc, out, err = _run(["gradcheck", "--inject-fault", "warp.map", "--out", str(tmp_path / "b")], capsys)
    assert rc == cli.EXIT_VERIFY
    assert "warp.map" in err
    rc, _, _ = _run(["gradcheck", "--out", str(tmp_path / "c")], capsys)
    assert (tmp_path / "a" / "gradcheck.csv").read_bytes() == (tmp_path / "c" / "gradcheck.csv").read_bytes()
