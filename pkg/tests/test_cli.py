import hashlib
import json
import subprocess
import sys
from pathlib import Path

import pytest

from inasbench.artifacts import load_csv, load_json
from inasbench.cli import main

ROOT = Path(__file__).resolve().parents[1]
WORKED = ROOT / "configs" / "worked_example"
TOY = ROOT / "configs" / "toy"
NAS = ROOT / "configs" / "nas"


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr().out
    return code, json.loads(out) if out.strip() else None


def _worked(cmd, *extra, power="power.json"):
    return (cmd, "--net", WORKED / "net.json", "--design", WORKED / "design.json",
            "--power", WORKED / power, "--costs", WORKED / "costs.json", *extra)


def test_simulate_worked_example(capsys):
    code, doc = run(capsys, *_worked("simulate", "--input", WORKED / "input.json"))
    assert code == 0
    assert doc["result"]["latency_ticks"] == 60
    assert doc["result"]["cycles"] == 1
    assert doc["output_matches_reference"] is True


def test_simulate_with_faults(capsys, tmp_path):
    dump = tmp_path / "nvm.bin"
    code, doc = run(capsys, *_worked("simulate", "--input", WORKED / "input.json", "--faults",
                                     WORKED / "faults.json", "--nvm-dump", dump))
    assert code == 0
    assert doc["result"]["latency_ticks"] == 90
    assert doc["faults"] == [30]
    assert dump.read_bytes().hex().startswith("175a0100")
    code, a = run(capsys, *_worked("simulate", "--fault-mean", "20", "--seed", "3"))
    code, b = run(capsys, *_worked("simulate", "--fault-mean", "20", "--seed", "3"))
    assert a == b and a["output_matches_reference"]


def test_predict_and_infeasible(capsys):
    code, doc = run(capsys, *_worked("predict"))
    assert code == 0 and doc["latency_ticks"] == 60
    code, doc = run(capsys, *_worked("predict", power="power_infeasible.json"))
    assert code == 3
    assert doc["error"] == "infeasible" and "needs 39" in doc["message"]


def test_infer_matches(capsys):
    code, doc = run(capsys, "infer", "--net", TOY / "net.json", "--design", TOY / "design.json",
                    "--input", TOY / "input.json")
    assert code == 0
    assert doc["match"] is True
    assert doc["reference"] == [304, -276]
    for seed in range(3):
        code, doc = run(capsys, "infer", "--net", TOY / "net.json", "--design", TOY / "design.json",
                        "--seed", seed)
        assert doc["match"] is True


def test_explore(capsys):
    code, doc = run(capsys, "explore", "--net", WORKED / "net.json", "--power", WORKED / "power.json",
                    "--costs", WORKED / "costs.json", "--latency-req", "1000")
    assert code == 0
    assert doc["estimate"]["latency_ticks"] <= 60
    code, doc = run(capsys, "explore", "--net", WORKED / "net.json", "--power", WORKED / "power.json",
                    "--costs", WORKED / "costs.json", "--latency-req", "10")
    assert code == 3


def test_nas_deterministic(tmp_path, capsys):
    outs = []
    for name in ("a.json", "b.json"):
        out = tmp_path / name
        code, _ = run(capsys, "nas", "--space", NAS / "space.json", "--power", NAS / "power.json",
                      "--costs", NAS / "costs.json", "--latency-req", "300000", "--seed", "7",
                      "--population", "4", "--generations", "2", "--out", out)
        assert code == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]
    sol = load_json(tmp_path / "a.json", "solution")
    assert sol["estimate"].latency_ticks <= 300000


def test_sched(capsys):
    code, doc = run(capsys, "sched", "--taskset", TOY / "taskset.json", "--power", TOY / "power.json",
                    "--costs", WORKED / "costs.json", "--simulate")
    assert code == 0
    assert set(doc["wcets"]) == {"0", "1"}
    assert doc["simulation"]["misses"] == [] or not doc["schedulable"]


def test_dump(tmp_path, capsys):
    code, doc = run(capsys, "dump", "--net", TOY / "net.json", "--design", TOY / "design.json",
                    "--out-dir", tmp_path)
    assert code == 0
    golden = Path(__file__).parent / "golden"
    assert (tmp_path / "weights.h").read_text() == (golden / "toy_header.h").read_text()
    assert sorted(load_csv(tmp_path / "csv")) == [0, 1]
    assert load_json(tmp_path / "net.json", "network") == load_json(TOY / "net.json", "network")


def test_config_errors_exit_2(tmp_path, capsys):
    code, doc = run(capsys, *_worked("predict", power="missing.json"))
    assert code == 2 and doc["error"] == "missing_file"
    bad = tmp_path / "power.json"
    bad.write_text(json.dumps({"e_budget": 60, "volts": 3}))
    code, doc = run(capsys, "predict", "--net", WORKED / "net.json", "--design", WORKED / "design.json",
                    "--power", bad, "--costs", WORKED / "costs.json")
    assert code == 2 and doc["type"] == "SchemaError" and doc["path"] == "$"
    design = tmp_path / "design.json"
    design.write_text(json.dumps({"tiles": [], "batch_size": 1}))
    code, doc = run(capsys, "predict", "--net", WORKED / "net.json", "--design", design,
                    "--power", WORKED / "power.json", "--costs", WORKED / "costs.json")
    assert code == 2 and doc["type"] == "DesignError"


def test_config_dir_env(monkeypatch, capsys):
    monkeypatch.setenv("INASBENCH_CONFIG_DIR", str(WORKED))
    code, doc = run(capsys, "predict", "--net", "net.json", "--design", "design.json", "--power", "power.json",
                    "--costs", "costs.json")
    assert code == 0 and doc["cycles"] == 1


def test_inputs_not_modified(tmp_path, capsys):
    before = {p: hashlib.sha256(p.read_bytes()).hexdigest() for p in WORKED.iterdir()}
    run(capsys, *_worked("simulate", "--faults", WORKED / "faults.json", "--out", tmp_path / "r.json"))
    assert before == {p: hashlib.sha256(p.read_bytes()).hexdigest() for p in WORKED.iterdir()}


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "inasbench", *map(str, _worked("predict"))],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["latency_ticks"] == 60
