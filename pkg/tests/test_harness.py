import csv
import json

import pytest

from pervasive.domain import ContextMode, WorkerJoin
from pervasive.harness import EXIT_INVALID, EXIT_OK, EXIT_STALLED, ExperimentPlan, ladder, resolve, run, sweep_batch
from pervasive.harness.cli import main
from pervasive.harness.presets import batch_label, parse_batch
from pervasive.harness.scenario_file import ScenarioFileError, build_scenario, load_scenario_file
from pervasive.sim.calibration import load_constants
from pervasive.sim.traces import read_trace_csv

CAL = load_constants()


def test_ladder_presets_resolve():
    names = ladder()
    assert names[:3] == ["pv0", "pv1", "pv2"]
    assert "pv3_7.5k" in names and "pv4_1k" in names and names[-2:] == ["pv6_busy", "pv6_quiet"]
    for name in names:
        p = resolve(name, CAL)
        cfg = p.config
        assert cfg.total_inferences == 150_000
        assert cfg.start_threshold == 0.95
        if name != "pv0" and not name.startswith("pv6"):
            joins = [e for e in cfg.trace.events if isinstance(e.action, WorkerJoin)]
            assert len(joins) == 20
            res = joins[0].action.profile.resources
            assert (res.cores, res.memory, res.disk, res.gpus) == (2, 10_000, 70_000, 1)
    assert resolve("pv5p", CAL).ends_drained and resolve("pv6_busy", CAL).illustrative
    assert resolve("pv3_3k", CAL).config.batch_size == 3000
    assert resolve("pv1", CAL).config.context_mode is ContextMode.NAIVE


def test_unknown_preset():
    with pytest.raises(KeyError):
        resolve("pv9", CAL)


def test_batch_labels():
    assert [batch_label(b) for b in (1, 100, 1000, 7500)] == ["1", "100", "1k", "7.5k"]
    assert parse_batch("7.5k") == 7500 and parse_batch("300") == 300
    with pytest.raises(ValueError):
        parse_batch("abc")


def test_scenario_file_overrides(tmp_path):
    path = tmp_path / "mine.yaml"
    path.write_text("preset: pv3_100\nbatch_size: 250\nrepetitions: 2\nworkload:\n  t_model_load: 5\n")
    cfg, drained, reps = load_scenario_file(path, cal=CAL)
    assert cfg.name == "mine" and cfg.batch_size == 250 and reps == 2 and not drained
    assert cfg.context_mode is ContextMode.PARTIAL
    assert cfg.workload.t_model_load == 5.0


def test_scenario_file_drain_and_bad_keys():
    cfg, drained = build_scenario({"drain": {"warmup_min": 1}}, None, CAL)
    assert drained
    with pytest.raises(ScenarioFileError):
        build_scenario({"bogus": 1}, None, CAL)
    with pytest.raises(ScenarioFileError):
        build_scenario({"workload": {"nope": 1}}, None, CAL)
    with pytest.raises(ScenarioFileError):
        build_scenario({"pool": "moon"}, None, CAL)


def test_plan_writes_artifacts(tmp_path):
    p = resolve("pv2", CAL)
    from dataclasses import replace

    small = replace(p, config=replace(p.config, total_inferences=5_000))
    res = run(ExperimentPlan("t", [small], 2, tmp_path))
    assert res.exit_code == EXIT_OK
    assert [r.run_id for r in res.runs] == ["pv2-r0", "pv2-r1"]
    rows = list(csv.DictReader((tmp_path / "summary.csv").open()))
    assert [r["run_id"] for r in rows] == ["pv2-r0", "pv2-r1"]
    assert rows[0]["completed_inferences"] == "5000"
    first = json.loads((tmp_path / "pv2-r0" / "events.jsonl").open().readline())
    assert set(first) >= {"seq", "time", "actor", "event"}
    assert (tmp_path / "series.csv").exists()


def test_cli_run_ok(tmp_path, capsys):
    code = main(["run", "--preset", "pv4_100", "--total-inferences", "4000", "--output-dir", str(tmp_path)])
    assert code == EXIT_OK
    assert "pv4_100" in capsys.readouterr().out
    assert (tmp_path / "summary.csv").exists()


def test_cli_output_env(tmp_path, monkeypatch):
    monkeypatch.setenv("PERVASIVE_OUTPUT", str(tmp_path))
    assert main(["run", "--preset", "pv2", "--total-inferences", "2000", "--no-events", "--name", "envrun"]) == EXIT_OK
    assert (tmp_path / "envrun" / "summary.csv").exists()
    assert not (tmp_path / "envrun" / "pv2" / "events.jsonl").exists()


def test_cli_invalid(tmp_path, capsys):
    assert main(["run", "--preset", "pv2", "--batch-size", "0", "--output-dir", str(tmp_path)]) == EXIT_INVALID
    assert main(["run", "--preset", "pv2", "--transfer-cap", "0", "--output-dir", str(tmp_path)]) == EXIT_INVALID
    assert "transfer_cap" in capsys.readouterr().err
    assert main(["run", "--preset", "nope", "--output-dir", str(tmp_path)]) == EXIT_INVALID
    assert main(["run", "--output-dir", str(tmp_path)]) == EXIT_INVALID
    assert main(["sweep-batch", "--batch-sizes", "0"]) == EXIT_INVALID


def test_cli_trace_gen_and_replay(tmp_path):
    trace = tmp_path / "drain.csv"
    assert main(["trace", "gen", "--kind", "drain", "--warmup", "1", "--rate", "60", "--out", str(trace)]) == EXIT_OK
    assert len(read_trace_csv(trace, CAL).events) == 40
    out = tmp_path / "replay"
    assert main(["trace", "replay", str(trace), "--output-dir", str(out)]) == EXIT_STALLED
    assert main(["trace", "replay", str(trace), "--allow-drained", "--output-dir", str(out)]) == EXIT_OK
    churn = tmp_path / "churn.csv"
    assert main(["trace", "gen", "--out", str(churn), "--seed", "3", "--min-workers", "4", "--max-workers", "8", "--horizon", "60"]) == 0
    code = main(["trace", "replay", str(churn), "--total-inferences", "3000", "--output-dir", str(out)])
    assert code == EXIT_OK


def test_sweep_single_size():
    res = sweep_batch("pervasive", [100], cal=CAL)
    assert len(res.table) == 1 and res.optimum == 100 and res.spread == 1.0
    with pytest.raises(ValueError):
        sweep_batch("pervasive", [], cal=CAL)


def test_compare_two_drains(tmp_path, capsys):
    code = main(["run", "--preset", "pv5p", "--compare", "pv5s", "--no-events", "--output-dir", str(tmp_path)])
    assert code == EXIT_OK
    assert "pv5p vs pv5s" in capsys.readouterr().out
