import csv
import json
from pathlib import Path

import pytest

from ioslab import cli, parallel
from ioslab.config import ConfigError, apply_overrides, levenshtein, suggest

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def run(argv, capsys):
    code = cli.main(argv)
    cap = capsys.readouterr()
    return code, cap.out, cap.err


def strip(report):
    return {k: v for k, v in report.items() if k != "timestamp"}


def write(tmp_path, cfg, name="c.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


@pytest.fixture(autouse=True)
def _reset_jobs():
    yield
    parallel.set_jobs(None)


def test_all_shipped_configs_validate(capsys):
    for p in sorted(CONFIGS.glob("*.json")):
        code, out, _ = run(["validate", "--config", str(p)], capsys)
        assert code == 0, (p.name, out)


def test_exit_ok_and_report_file(tmp_path, capsys):
    code, _, _ = run(["run", "--config", str(CONFIGS / "kl_tools_oracles.json"), "--out", str(tmp_path)], capsys)
    assert code == cli.EXIT_OK
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["status"] == "passed" and rep["exit_code"] == 0
    assert {"schema_version", "tool", "config_hash", "task", "seed", "result", "timestamp"} <= set(rep)


def test_exit_violation_and_witness_csv(tmp_path, capsys):
    code, _, _ = run(["run", "--config", str(CONFIGS / "falsify_integrator_ios.json"), "--out", str(tmp_path)], capsys)
    assert code == cli.EXIT_VIOLATION
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["status"] == "violations_found"
    with open(tmp_path / "witness.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][:2] == ["t", "x1"] and len(rows) > 2


def test_exit_config_error_lists_all_problems(tmp_path, capsys):
    cfg = {"schema_version": 7, "task": "falsfy", "system": "integrater", "seed": -1}
    code, out, err = run(["run", "--config", write(tmp_path, cfg)], capsys)
    assert code == cli.EXIT_CONFIG
    rep = json.loads(out)
    text = " ".join(rep["problems"])
    assert "schema_version" in text and "seed" in text
    assert "'falsify'" in text and "'integrator'" in text
    assert "config error" in err


def test_unreadable_config(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run(["run", "--config", str(bad)], capsys)[0] == cli.EXIT_CONFIG
    assert run(["validate", "--config", str(tmp_path / "missing.json")], capsys)[0] == cli.EXIT_CONFIG


def test_exit_runtime_error(tmp_path, capsys):
    cfg = {"schema_version": 1, "task": "kl-tools", "kl-tools": {"operations": [
        {"op": "invert", "f": {"class": "K", "expr": "s/(1+s)"}, "y": [2]}]}}
    code, out, err = run(["run", "--config", write(tmp_path, cfg)], capsys)
    assert code == cli.EXIT_RUNTIME
    assert json.loads(out)["status"] == "runtime_error"
    assert "runtime error" in err


def test_validate_does_not_run(tmp_path, capsys, monkeypatch):
    def boom(*a, **k):
        raise AssertionError("validate must not simulate")
    monkeypatch.setitem(cli.TASK_RUNNERS, "falsify", boom)
    code, out, _ = run(["validate", "--config", str(CONFIGS / "falsify_integrator_ios.json")], capsys)
    assert code == 0 and out == ""


def test_set_override_and_seed(tmp_path, capsys):
    base = str(CONFIGS / "simulate_exp_decay.json")
    code, out, _ = run(["run", "--config", base, "--set", "simulate.halving_check=false", "--seed", "9"], capsys)
    assert code == cli.EXIT_OK
    rep = json.loads(out)
    assert rep["seed"] == 9
    assert "halving" not in json.dumps(rep["result"])


def test_apply_overrides_types():
    cfg = apply_overrides({"a": {"b": 1}}, ["a.b=2.5", "a.c=[1, 2]", "d.e=hello", "f=true"])
    assert cfg == {"a": {"b": 2.5, "c": [1, 2]}, "d": {"e": "hello"}, "f": True}
    with pytest.raises(ConfigError):
        apply_overrides({}, ["novalue"])


def test_suggestions():
    assert levenshtein("kitten", "sitting") == 3
    assert suggest("scalar_stabel", ["scalar_stable", "integrator"]) == "scalar_stable"


def test_registry_listing(capsys):
    code, out, _ = run(["registry", "--json"], capsys)
    assert code == 0
    reg = json.loads(out)
    assert "paper_counterexample" in reg and reg["paper_counterexample"]["n"] == 2
    code, out, _ = run(["registry"], capsys)
    assert "integrator" in out


def test_simulate_csv_artifact(tmp_path, capsys):
    cfg = {"schema_version": 1, "task": "simulate", "system": "scalar_stable",
           "simulate": {"xi": [1.0], "horizon": 2, "samples": 5, "signal": {"constant": [0.5]}}}
    code, _, _ = run(["run", "--config", write(tmp_path, cfg), "--out", str(tmp_path / "o")], capsys)
    assert code == 0
    with open(tmp_path / "o" / "trajectory.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["t", "x1", "u1", "y1"]
    times = [float(r[0]) for r in rows[1:]]
    assert times == sorted(times) and {0.0, 0.5, 1.0, 1.5, 2.0} <= set(times)


@pytest.mark.parametrize("name", ["falsify_integrator_ios.json", "kl_tools_oracles.json"])
def test_deterministic_and_jobs_invariant(name, capsys, monkeypatch):
    path = str(CONFIGS / name)
    _, a, _ = run(["run", "--config", path], capsys)
    _, b, _ = run(["run", "--config", path, "--jobs", "4"], capsys)
    monkeypatch.setenv("IOSLAB_JOBS", "3")
    parallel.set_jobs(None)
    _, c, _ = run(["run", "--config", path], capsys)
    ra, rb, rc = (strip(json.loads(x)) for x in (a, b, c))
    assert ra == rb == rc


def test_jobs_env(monkeypatch):
    parallel.set_jobs(None)
    monkeypatch.setenv("IOSLAB_JOBS", "5")
    assert parallel.jobs() == 5
    parallel.set_jobs(2)
    assert parallel.jobs() == 2
