"""Real manager and worker processes over loopback TCP."""

import pytest

from pervasive.harness.cli import main
from pervasive.harness.live import COMPLETED, STALLED, live_smoke


def test_hard_kill_mid_run_requeues_once():
    r = live_smoke(workers=3, tasks=100, batch=1, kill_at=0.5, timeout=60)
    assert r.status == COMPLETED, r.render()
    assert r.completed == 100 and r.exactly_once
    assert len(r.killed) == 1
    assert r.requeues == 1
    assert r.materializations == 3
    assert all(n == 1 for n in r.per_worker_materializations.values())
    assert r.passed


def test_partial_mode_reloads_per_invocation():
    r = live_smoke(workers=2, tasks=20, batch=2, mode="partial", kill_at=None, timeout=60)
    assert r.passed, r.render()
    assert r.requeues == 0 and not r.killed
    assert r.materializations == 20


def test_no_workers_stalls():
    r = live_smoke(workers=0, tasks=5, timeout=5)
    assert r.status == STALLED and not r.passed and r.completed == 0


def test_naive_mode_rejected():
    with pytest.raises(ValueError):
        live_smoke(mode="naive")


def test_cli_live_smoke(capsys):
    assert main(["live-smoke", "--workers", "2", "--tasks", "10"]) == 0
    assert "PASS" in capsys.readouterr().out
