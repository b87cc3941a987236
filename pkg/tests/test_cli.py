import json
import subprocess
import sys

import pytest

from atm.cli import main
from atm.synth import decode_pgm, read_dataset

TINY = {
    "epochs": 1, "batch_size": 4, "lr": 0.05,
    "stem": {"channels": [2, 3, 4], "blocks_per_stage": 1},
    "atm": {"ops": ["-"], "context": 2, "mul": 3, "width": 2, "extractor": "fc"},
    "dataset": {"n_train": 8, "n_test": 4, "frames": 3, "size": 12, "radius": 1.5,
                "velocity": 1.0},
}


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(TINY))
    return p


def test_unknown_flag_is_usage_error(capsys):
    assert main(["train", "--bogus"]) == 2
    assert main(["nonsense"]) == 2
    assert main([]) == 2


def test_malformed_config_is_usage_error(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["train", "--config", str(bad)]) == 2
    bad.write_text(json.dumps({"epochz": 1}))
    assert main(["train", "--config", str(bad)]) == 2
    assert main(["train", "--config", str(tmp_path / "missing.json")]) == 2


def test_internal_failure_exits_1(tmp_path):
    cfg = dict(TINY, dataset=dict(TINY["dataset"], velocity=9.0))  # blob cannot fit
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cfg))
    assert main(["train", "--config", str(p), "--out", str(tmp_path / "run")]) == 1


def test_gen_writes_layout(cfg_path, tmp_path):
    out = tmp_path / "data"
    assert main(["gen", "--config", str(cfg_path), "--out", str(out)]) == 0
    assert (out / "train" / "0" / "0.atmc").exists()
    assert len(read_dataset(out, "test")) == 4


def test_train_then_eval_round_trip(cfg_path, tmp_path, capsys):
    run = tmp_path / "run"
    assert main(["train", "--config", str(cfg_path), "--out", str(run), "--seed", "3"]) == 0
    report = json.loads((run / "report.json").read_text())
    assert set(report) == {"epochs", "test_top1", "macs", "wall_ms", "config"}
    assert report["config"]["seed"] == 3
    assert (run / "weights.npz").exists()
    assert main(["eval", "--out", str(run)]) == 0
    assert "match" in capsys.readouterr().out
    assert main(["eval", "--out", str(tmp_path / "nowhere")]) == 2


def test_flops_increasing_in_z(capsys):
    assert main(["flops"]) == 0
    rows = [line.split() for line in capsys.readouterr().out.splitlines()[2:]]
    assert [int(r[0]) for r in rows] == [1, 2, 4, 6]
    totals = [int(r[-1]) for r in rows]
    assert all(a < b for a, b in zip(totals, totals[1:]))


def test_viz_writes_four_pgms(tmp_path):
    assert main(["viz", "--out", str(tmp_path), "--neighborhood", "3"]) == 0
    for name in ("add", "sub", "mul", "div"):
        assert decode_pgm((tmp_path / f"{name}.pgm").read_bytes()).shape == (28, 28)


def test_ablate_writes_one_report_per_cell(tmp_path):
    grid = {"base": TINY, "grid": {"ops": [["+"], ["-"]], "context": [1, 2]}}
    p = tmp_path / "grid.json"
    p.write_text(json.dumps(grid))
    out = tmp_path / "abl"
    assert main(["ablate", "--config", str(p), "--out", str(out)]) == 0
    reports = sorted(x.parent.name for x in out.glob("*/report.json"))
    assert reports == ["add_z1_fc_single", "add_z2_fc_single", "baseline",
                       "sub_z1_fc_single", "sub_z2_fc_single"]
    p.write_text(json.dumps({"base": TINY, "grid": {"width": [1]}}))
    assert main(["ablate", "--config", str(p), "--out", str(out)]) == 2


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "atm", "flops"], capture_output=True, text=True)
    assert res.returncode == 0 and "interaction" in res.stdout
