import json
import subprocess
import sys

import pytest

from qpi.cli import main

SMALL = """\
[scenario]
name = spin_exchange
gamma = 0.05

[schedule]
l = 2
a_bar = 1
b_bar = 4
flight_len = 7

[sampling]
shots = 10000
seed = 5

[evaluation]
grid = 0:60:2
"""


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "small.cfg"
    path.write_text(SMALL)
    return path


@pytest.fixture(scope="module")
def inferred(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = root / "small.cfg"
    cfg.write_text(SMALL)
    assert main(["simulate", "--config", str(cfg), "--out", str(root),
                 "--grid", "0:1100:5"]) == 0
    assert main(["infer", str(root / "dataset.qpd"), "--out", str(root)]) == 0
    return root


def test_simulate_writes_deterministic_files(config, tmp_path):
    for name in ("a", "b"):
        assert main(["simulate", "--config", str(config), "--out", str(tmp_path / name)]) == 0
    for f in ("dataset.qpd", "truth.qpt"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert main(["simulate", "--config", str(config), "--seed", "9",
                 "--out", str(tmp_path / "c")]) == 0
    assert (tmp_path / "c" / "dataset.qpd").read_bytes() != (
        tmp_path / "a" / "dataset.qpd").read_bytes()


def test_drift_config_shape(tmp_path):
    text = open("configs/drift.cfg").read().replace("a_bar = 10", "a_bar = 1").replace(
        "b_bar = 10", "b_bar = 1")
    cfg = tmp_path / "drift.cfg"
    cfg.write_text(text)
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    header = json.loads((tmp_path / "dataset.qpd").read_text().splitlines()[1])
    assert len(header["init_labels"]) == 2
    assert header["meas_labels"] == ["X", "Y", "Z"]


def test_missing_scenario_name_exits_1(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text(SMALL.replace("name = spin_exchange\n", ""))
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path)]) == 1


def test_unknown_inference_option_exits_1(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text(SMALL + "\n[inference]\nphi_acept = 1.5\n")
    assert main(["pipeline", "--config", str(cfg), "--out", str(tmp_path)]) == 1


def test_infer_outputs(inferred):
    for f in ("model.qpm", "dimension.txt", "infer_log.json"):
        assert (inferred / f).exists()
    model = json.loads((inferred / "model.qpm").read_text())
    assert set(model) == {"dimension", "init_labels", "meas_labels", "S", "T", "P"}
    stages = [e["stage"] for e in json.loads((inferred / "infer_log.json").read_text())]
    assert stages[0] == 1 and stages[-1] == 4


def test_truncated_dataset_exits_2(inferred, tmp_path):
    text = (inferred / "dataset.qpd").read_text()
    bad = tmp_path / "cut.qpd"
    bad.write_text(text[: len(text) // 2])
    assert main(["infer", str(bad), "--out", str(tmp_path)]) == 2


def test_evaluate_grid_rows(inferred, tmp_path):
    assert main(["evaluate", str(inferred / "model.qpm"), str(inferred / "truth.qpt"),
                 "--grid", "0:1100:5", "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "errors.csv").read_text().splitlines()
    assert lines[0] == "t,qpi_error,raw_error,qpt_error,n_avg"
    assert len(lines) == 1 + 221


def test_evaluate_beyond_truth_exits_1(inferred, tmp_path):
    assert main(["evaluate", str(inferred / "model.qpm"), str(inferred / "truth.qpt"),
                 "--grid", "0:2000:5", "--out", str(tmp_path)]) == 1


def test_evaluate_missing_truth_exits_2(inferred, tmp_path):
    assert main(["evaluate", str(inferred / "model.qpm"), str(tmp_path / "none.qpt"),
                 "--out", str(tmp_path)]) == 2


def test_evaluate_label_mismatch_exits_1(inferred, tmp_path):
    doc = json.loads((inferred / "model.qpm").read_text())
    doc["init_labels"] = ["p", "q", "r"]
    model = tmp_path / "m.qpm"
    model.write_text(json.dumps(doc))
    assert main(["evaluate", str(model), str(inferred / "truth.qpt"),
                 "--out", str(tmp_path)]) == 1


def test_pipeline_runs_and_summary(config, tmp_path):
    out = tmp_path / "p"
    assert main(["pipeline", "--config", str(config), "--out", str(out), "--runs", "2"]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert [r["seed"] for r in summary["runs"]] == [5, 6]
    assert sum(summary["d_counts"].values()) == 2
    assert summary["mean_qpi_error"] < summary["mean_qpt_error"]
    for j in range(2):
        assert (out / f"run_{j:03d}" / "errors.csv").exists()
    agg = (out / "aggregate.csv").read_text().splitlines()
    assert agg[0].startswith("t,qpi_error,qpi_stderr")
    assert main(["aggregate", str(out / "run_000" / "errors.csv"),
                 str(out / "run_001" / "errors.csv"), "--out", str(tmp_path / "agg")]) == 0
    assert (tmp_path / "agg" / "aggregate.csv").read_text() == (out / "aggregate.csv").read_text()


def test_selftest_passes(capsys):
    assert main(["selftest"]) == 0
    assert "FAIL" not in capsys.readouterr().out


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "qpi", "--version"], capture_output=True,
                         text=True)
    assert res.returncode == 0
    assert res.stdout.startswith("qpi ")
