import json

import pytest
from hypothesis import settings

from segisnet import cli

# fixed example generation so repeated runs are identical
settings.register_profile("repro", derandomize=True)
settings.load_profile("repro")

TINY = {
    "seed": 3,
    "synth": {"dims": [16, 24, 16], "pairs": 6},
    "train": {"epochs_max": 2},
}


@pytest.fixture(scope="session")
def tiny_runs(tmp_path_factory):
    """A six-pair dataset plus two-epoch joint, seg-only and reg-only runs."""
    root = tmp_path_factory.mktemp("tiny")
    cfg = root / "config.json"
    cfg.write_text(json.dumps(TINY))
    c = str(cfg)
    assert cli.main(["synth", "--config", c, "--out", str(root / "data")]) == 0
    for mode in ("joint", "seg", "reg"):
        rc = cli.main(["train", "--config", c, "--data", str(root / "data"), "--mode", mode,
                       "--out", str(root / mode)])
        assert rc == 0
    return root
