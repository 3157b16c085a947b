"""Command-line entry point: ``segisnet {synth,train,eval,gradcheck}``.

Settings come from an optional JSON config file (``--config``) with one
section per command, overridden by command-line flags.  Every run prints
its resolved configuration and stores it next to the outputs.

Exit codes: 0 success, 1 usage error, 2 data error, 3 verification failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import gradcheck, report, synth
from .losses import WeightSchedule
from .networks import NetworkParams, load_checkpoint, reg_config, seg_config
from .train import MODES, TrainConfig, check_splits, train
from .volume import VolumeFormatError, atomic_write_text

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_VERIFY = 0, 1, 2, 3
DEFAULT_SEED = 7

SYNTH_KEYS = {f.name for f in fields(synth.SynthConfig)} - {"seed"} | {"pairs", "val_fraction", "test_fraction"}
NET_KEYS = {"depth", "base_width", "convs_per_level", "branch_width"}
SCHEDULE_KEYS = {f.name for f in fields(WeightSchedule)}
TRAIN_KEYS = ({f.name for f in fields(TrainConfig)} - {"seed", "schedule"}) | NET_KEYS | SCHEDULE_KEYS | {"data"}
EVAL_KEYS = {"data", "joint", "seg", "reg", "split", "sc_literal", "figures"}
GRADCHECK_KEYS = {"reps", "fault"}
SECTIONS = {"synth": SYNTH_KEYS, "train": TRAIN_KEYS, "eval": EVAL_KEYS, "gradcheck": GRADCHECK_KEYS}
TOP_KEYS = {"seed", "out"} | set(SECTIONS)


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _seed(text):
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON config file")
    common.add_argument("--seed", type=_seed, default=argparse.SUPPRESS, help=f"random seed (default {DEFAULT_SEED})")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = _Parser(prog="segisnet", description="Joint segmentation and registration of longitudinal volumes.",
                     parents=[common])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--pairs", type=_positive_int, default=argparse.SUPPRESS, help="number of pairs (default 40)")

    p = sub.add_parser("train", parents=[common], help="train one pipeline mode")
    p.add_argument("--data", default=argparse.SUPPRESS, help="dataset directory")
    p.add_argument("--mode", choices=MODES, default=argparse.SUPPRESS)
    p.add_argument("--epochs", dest="epochs_max", type=_positive_int, default=argparse.SUPPRESS)
    p.add_argument("--lr", dest="lr0", type=float, default=argparse.SUPPRESS)

    p = sub.add_parser("eval", parents=[common], help="evaluate trained checkpoints")
    p.add_argument("--data", default=argparse.SUPPRESS, help="dataset directory")
    p.add_argument("--joint", default=argparse.SUPPRESS, help="joint-mode run dir or checkpoint")
    p.add_argument("--seg", default=argparse.SUPPRESS, help="seg-only run dir or checkpoint")
    p.add_argument("--reg", default=argparse.SUPPRESS, help="reg-only run dir or checkpoint")
    p.add_argument("--split", choices=("train", "val", "test"), default=argparse.SUPPRESS)
    p.add_argument("--sc-literal", dest="sc_literal", action="store_true", default=argparse.SUPPRESS,
                   help="spatial correlation with sum-of-magnitudes normalization")
    p.add_argument("--figures", action="store_true", default=argparse.SUPPRESS,
                   help="also render PNG bar charts")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--reps", type=_positive_int, default=argparse.SUPPRESS)
    p.add_argument("--inject-fault", dest="fault", choices=sorted(gradcheck.CHECKS), default=argparse.SUPPRESS,
                   help="corrupt one analytic gradient (harness self-test)")
    return parser


def load_config_file(path):
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}")
    if not isinstance(cfg, dict):
        raise UsageError("config file must hold a JSON object")
    unknown = set(cfg) - TOP_KEYS
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    for section, allowed in SECTIONS.items():
        body = cfg.get(section, {})
        if not isinstance(body, dict):
            raise UsageError(f"config section {section!r} must be an object")
        bad = set(body) - allowed
        if bad:
            raise UsageError(f"unknown keys in {section!r}: {sorted(bad)}")
    return cfg


DEFAULT_OUT = {"synth": "synth_data", "train": "runs/{mode}", "eval": "eval_out", "gradcheck": "gradcheck_out"}


def resolve(args) -> dict:
    """Merge defaults, config-file values and flags (flags win)."""
    ns = vars(args)
    cmd = ns["command"]
    file_cfg = load_config_file(ns["config"]) if "config" in ns else {}
    resolved = dict(file_cfg.get(cmd, {}))
    for key in SECTIONS[cmd]:
        if key in ns:
            resolved[key] = ns[key]
    resolved["seed"] = ns.get("seed", file_cfg.get("seed", DEFAULT_SEED))
    if cmd == "train":
        resolved.setdefault("mode", "joint")
        if resolved["mode"] not in MODES:
            raise UsageError(f"mode must be one of {MODES}, got {resolved['mode']!r}")
    out = ns.get("out", file_cfg.get("out", DEFAULT_OUT[cmd]))
    resolved["out"] = out.format(**resolved) if cmd == "train" else out
    return {"command": cmd, **resolved}


def echo_config(resolved):
    text = json.dumps(resolved, indent=2, sort_keys=True) + "\n"
    print(text, end="")
    out = Path(resolved["out"])
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "resolved_config.json", text)


def cmd_synth(r):
    cfg_keys = {k: r[k] for k in r if k in SYNTH_KEYS - {"pairs", "val_fraction", "test_fraction"}}
    try:
        cfg = synth.config_from_dict({**cfg_keys, "seed": r["seed"]})
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc))
    pairs = r.get("pairs", 40)
    if not isinstance(pairs, int) or pairs < 1:
        raise UsageError(f"--pairs must be a positive integer, got {pairs!r}")
    path = synth.write_dataset(r["out"], cfg, pairs, r.get("val_fraction", 0.15), r.get("test_fraction", 0.15))
    print(f"manifest: {path}")
    return EXIT_OK


def _load_data(path):
    if path is None:
        raise UsageError("--data is required")
    try:
        return synth.load_dataset(path)
    except (FileNotFoundError, KeyError, VolumeFormatError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot load dataset {path}: {exc}")


def train_config_from(r) -> tuple[TrainConfig, dict]:
    base = TrainConfig(mode=r["mode"])
    sched = {k: r[k] for k in SCHEDULE_KEYS if k in r}
    schedule = WeightSchedule(**{**asdict(base.schedule), **sched})
    kw = {k: r[k] for k in ("epochs_max", "lr0", "decay_factor", "decay_patience", "early_stop_patience") if k in r}
    try:
        cfg = TrainConfig(mode=r["mode"], seed=r["seed"], schedule=schedule, **kw)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc))
    net_kw = {k: r[k] for k in NET_KEYS if k in r}
    return cfg, net_kw


def cmd_train(r):
    config, net_kw = train_config_from(r)
    manifest, splits = _load_data(r.get("data"))
    if not splits["train"] or not splits["val"]:
        raise DataError("dataset needs non-empty train and val splits")
    try:
        check_splits(splits["train"], splits["val"], splits["test"])
    except ValueError as exc:
        raise DataError(str(exc))
    k = len(manifest["channel_semantics"])
    c_img = splits["train"][0].seg_img_s.shape[-1]
    try:
        net = NetworkParams.initialize(seg_config(c_img, k, **net_kw), reg_config(**net_kw), config.seed)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc))
    result = train(config, splits["train"], splits["val"], net, out_dir=r["out"])
    print(json.dumps(result.summary(), sort_keys=True))
    return EXIT_OK


def _checkpoint(path):
    p = Path(path)
    if p.is_dir():
        p = p / "best"
    try:
        return load_checkpoint(p)[0]
    except FileNotFoundError as exc:
        raise DataError(str(exc))


def cmd_eval(r):
    pipelines = {}
    if r.get("joint"):
        pipelines["segis"] = _checkpoint(r["joint"])
    if r.get("seg") or r.get("reg"):
        if not (r.get("seg") and r.get("reg")):
            raise UsageError("the cnn pipeline needs both --seg and --reg")
        seg_net = _checkpoint(r["seg"])
        reg_net = _checkpoint(r["reg"])
        pipelines["cnn"] = NetworkParams(seg_net.seg_cfg, reg_net.reg_cfg, seg_net.theta, reg_net.psi)
    if not pipelines:
        raise UsageError("give --joint and/or --seg with --reg")
    manifest, splits = _load_data(r.get("data"))
    pairs = splits[r.get("split", "test")]
    if not pairs:
        raise DataError(f"split {r.get('split', 'test')!r} is empty")
    result = report.evaluate(pipelines, pairs, manifest["channel_semantics"], r.get("sc_literal", False))
    for path in report.write_report(result, r["out"], figures=r.get("figures", False)):
        print(f"wrote {path}")
    print(report.format_comparison(result.comparison_rows))
    return EXIT_OK


def cmd_gradcheck(r):
    results = gradcheck.run_checks(seed=r["seed"], reps=r.get("reps", 1), fault=r.get("fault"))
    rows = [{"check": c.name, "seed": c.seed, "rel_error": c.rel_error, "tol": c.tol,
             "status": "pass" if c.passed else "FAIL"} for c in results]
    for row in rows:
        print(f"{row['status']:<4} {row['check']:<22} seed={row['seed']:<11} rel_err={row['rel_error']:.3e}")
    atomic_write_text(Path(r["out"]) / "gradcheck.csv",
                      report.csv_text(rows, ["check", "seed", "rel_error", "tol", "status"]))
    failed = [c.name for c in results if not c.passed]
    if failed:
        print(f"gradient check failed: {', '.join(sorted(set(failed)))}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        resolved = resolve(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if vars(args).get("verbose") else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    np.seterr(over="ignore", under="ignore")
    try:
        echo_config(resolved)
        return COMMANDS[resolved["command"]](resolved)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
