"""Run scenarios and write their artifacts."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

from ..domain import ContextMode, EventLog, validate_scenario
from ..metrics import RunSummary, series_csv, summary_csv
from ..sim.calibration import Calibration, load_constants
from ..sim.engine import COMPLETED, STALLED, SimRun, run_scenario
from ..sim.pools import POOLS, default_scenario, static_trace
from .presets import Preset, resolve

EXIT_OK = 0
EXIT_STALLED = 2
EXIT_INVALID = 3

OUTPUT_ENV = "PERVASIVE_OUTPUT"


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ENV, "runs"))


@dataclass
class ExperimentPlan:
    name: str
    scenarios: list[Preset]
    repetitions: int = 1
    output_dir: Path | None = None
    write_events: bool = True

    @classmethod
    def from_presets(cls, names: Sequence[str], output_dir=None, repetitions: int = 1, cal=None) -> "ExperimentPlan":
        cal = cal or load_constants()
        return cls("+".join(names), [resolve(n, cal) for n in names], repetitions, output_dir and Path(output_dir))

    def directory(self) -> Path:
        return Path(self.output_dir) if self.output_dir is not None else output_root() / self.name


@dataclass
class RunRecord:
    run_id: str
    preset: Preset
    sim: SimRun

    @property
    def summary(self) -> RunSummary:
        return self.sim.summary

    @property
    def ok(self) -> bool:
        return self.sim.status == COMPLETED or (self.preset.ends_drained and self.sim.status == STALLED)


@dataclass
class PlanResult:
    exit_code: int
    runs: list[RunRecord]
    directory: Path
    problems: list[str]


def write_events(log: EventLog, path: Path) -> None:
    dumps = json.JSONEncoder(separators=(",", ":"), ensure_ascii=False).encode
    with path.open("w", encoding="utf-8") as fh:
        buf = []
        for rec in log:
            buf.append(dumps(rec.to_json()))
            if len(buf) >= 8192:
                fh.write("\n".join(buf) + "\n")
                buf.clear()
        if buf:
            fh.write("\n".join(buf) + "\n")


def run(plan: ExperimentPlan, progress=None) -> PlanResult:
    """Execute every scenario of ``plan``; exit code 0 iff each reached its expected end."""
    out = plan.directory()
    problems = []
    for p in plan.scenarios:
        problems += [f"{p.name}: {v}" for v in validate_scenario(p.config)]
    if problems:
        return PlanResult(EXIT_INVALID, [], out, problems)
    out.mkdir(parents=True, exist_ok=True)
    records: list[RunRecord] = []
    for p in plan.scenarios:
        for rep in range(plan.repetitions):
            cfg = p.config if rep == 0 else replace(p.config, seed=p.config.seed + rep)
            run_id = p.name if plan.repetitions == 1 else f"{p.name}-r{rep}"
            sim = run_scenario(cfg)
            if plan.write_events:
                d = out / run_id
                d.mkdir(exist_ok=True)
                write_events(sim.event_log, d / "events.jsonl")
            sim.event_log = EventLog()  # release the records; the summary is kept
            records.append(RunRecord(run_id, p, sim))
            if progress:
                progress(records[-1])
    rows = [(r.run_id, r.summary) for r in records]
    (out / "summary.csv").write_text(summary_csv(rows))
    (out / "series.csv").write_text(series_csv(rows))
    stalled = [r.run_id for r in records if not r.ok]
    return PlanResult(EXIT_STALLED if stalled else EXIT_OK, records, out, [f"{s}: stalled" for s in stalled])


def exhaustion_time(s: RunSummary) -> int:
    """First time the pool drops to zero workers after having had some; run end otherwise."""
    seen = False
    for t, c in s.connected_workers_series:
        if c > 0:
            seen = True
        elif seen:
            return t
    return s.end_ms


def completed_at_exhaustion(s: RunSummary) -> int:
    return s.completed_at(exhaustion_time(s))


def compare(a: RunSummary, b: RunSummary) -> dict[str, float]:
    """Differences ``a - b`` in makespan and in completed inferences at pool exhaustion."""
    ca, cb = completed_at_exhaustion(a), completed_at_exhaustion(b)
    return {
        "makespan_diff_s": a.makespan - b.makespan,
        "completed_a": ca,
        "completed_b": cb,
        "completed_gap": ca - cb,
        "lost_a": a.inferences_lost,
        "lost_b": b.inferences_lost,
    }


@dataclass
class SweepResult:
    mode: ContextMode
    table: list[tuple[int, float]]  # (B, makespan) in input order

    @property
    def ranked(self) -> list[tuple[int, float]]:
        return sorted(self.table, key=lambda r: (r[1], r[0]))

    @property
    def optimum(self) -> int:
        return self.ranked[0][0]

    @property
    def spread(self) -> float:
        spans = [m for _, m in self.table]
        return max(spans) / min(spans)

    def render(self) -> str:
        lines = [f"{'rank':>4}  {'B':>6}  {'makespan_s':>12}"]
        for i, (b, m) in enumerate(self.ranked, 1):
            lines.append(f"{i:>4}  {b:>6}  {m:>12.1f}")
        lines.append(f"optimum: B={self.optimum}")
        return "\n".join(lines)


def sweep_batch(
    mode: str | ContextMode,
    batch_sizes: Iterable[int],
    pool: str = "mixed-20",
    seed: int = 0,
    cal: Calibration | None = None,
) -> SweepResult:
    cal = cal or load_constants()
    mode = ContextMode(mode)
    sizes = list(batch_sizes)
    if not sizes or any(b < 1 for b in sizes):
        raise ValueError("batch sizes must be >= 1")
    trace = static_trace(POOLS[pool](cal=cal))
    table = []
    for b in sizes:
        cfg = default_scenario(mode, b, cal, trace=trace, seed=seed)
        sim = run_scenario(cfg)
        if sim.status != COMPLETED:
            raise RuntimeError(f"B={b} stalled")
        table.append((b, sim.summary.makespan))
    return SweepResult(mode, table)


def summaries(records: Iterable[RunRecord]) -> dict[str, RunSummary]:
    return {r.run_id: r.summary for r in records}
