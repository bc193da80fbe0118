import json
import subprocess
import sys
from importlib import resources

import pytest

from ftrecover.cli import main

from conftest import BASE

FOUR_BY_FOUR_FIRST_ROW = "P0: F0 F1 F2 F3  -  -  - B0  - B1  - B2  - B3"


def write(tmp_path, name, obj):
    path = tmp_path / name
    path.write_text(json.dumps(obj))
    return str(path)


def test_schedule_dump_text(capsys):
    assert main(["schedule-dump", "4", "4"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == FOUR_BY_FOUR_FIRST_ROW
    assert out[-1] == "bubble ratio 3/7 = 0.4286"


def test_schedule_dump_json(capsys):
    assert main(["schedule-dump", "2", "1", "--format", "json"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["bubble_ratio"] == "1/2" and len(out["slots"]) == 2


def test_run_writes_outputs(tmp_path, capsys):
    cfg = dict(BASE, strategy="logging", failures=[{"machine": 1, "iteration": 15}])
    out_dir = tmp_path / "out"
    assert main(["run", write(tmp_path, "c.json", cfg), "--out", str(out_dir)]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["iterations"] == 30
    assert summary["recoveries"][0]["strategy"] == "LoggingReplay"
    report = json.loads((out_dir / "report.json").read_text())
    traj = json.loads((out_dir / "trajectory.json").read_text())
    assert report["final_digest"] == traj["30"] == summary["final_digest"]
    assert json.loads((out_dir / "timing.json").read_text())[0]["failure_iteration"] == 15


def test_bad_config_exit_code(tmp_path, capsys):
    bad = dict(BASE, topology={"machines": 3, "stages": 8, "micro_batches": 4})
    assert main(["run", write(tmp_path, "c.json", bad)]) == 2
    assert "config error" in capsys.readouterr().err
    assert main(["run", str(tmp_path / "missing.json")]) == 2


def test_bad_injection_exit_code(tmp_path):
    cfg = dict(BASE, failures=[{"machine": 1, "iteration": 3, "phase": "MidUpdate(99)"}])
    assert main(["run", write(tmp_path, "c.json", cfg), "--out", str(tmp_path / "o")]) == 2


def test_unrecoverable_exit_code(tmp_path, capsys):
    cfg = dict(BASE, failures=[{"machine": m, "iteration": 5} for m in range(4)])
    assert main(["run", write(tmp_path, "c.json", cfg), "--out", str(tmp_path / "o")]) == 3
    assert "unrecoverable" in capsys.readouterr().err


def test_plan_and_oracle(tmp_path, capsys):
    profile = str(resources.files("ftrecover.data.profiles").joinpath("uniform4.json"))
    assert main(["plan", profile, "--oracle", "--lost-iterations", "10"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["groups"] == [[0, 1], [2], [3]]
    assert out["est_storage"] == 2e11
    assert out["oracle_gap"] == 1.0
    assert out["expected_recovery_seconds"] == pytest.approx(20.0)


def test_simulate_reports_speedup(capsys):
    assert main(["simulate", "wide-resnet-50", "--repetitions", "3"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["strategy"] == "Replication"
    assert 1.1 < out["speedup"] < 1.25
    assert [r["strategy"] for r in out["results"]] == ["GlobalCkpt", "Replication"]


def test_simulate_sweep_csv(tmp_path, capsys):
    dest = tmp_path / "s.csv"
    args = ["simulate", "bert-128", "--sweep", "mtbf", "--values", "8,17", "--strategy", "GlobalCkpt", "--csv", str(dest)]
    assert main(args) == 0
    lines = dest.read_text().splitlines()
    assert lines[0] == "mtbf,strategy,mean_hours,mean_failures" and len(lines) == 3
    with pytest.raises(SystemExit):
        main(["simulate", "bert-128", "--sweep", "mtbf"])


def test_verify_subcommand(tmp_path, capsys):
    cfg = dict(BASE, strategy="logging", failures=[{"machine": 2, "iteration": 12, "phase": "MidUpdate(3)"}])
    assert main(["verify", write(tmp_path, "c.json", cfg), "--json", str(tmp_path / "v.json")]) == 0
    assert capsys.readouterr().out.startswith("PASS t ")
    assert json.loads((tmp_path / "v.json").read_text())[0]["passed"]


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "ftrecover", "schedule-dump", "1", "3"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.startswith("P0: F0 B0 F1 B1 F2 B2")
