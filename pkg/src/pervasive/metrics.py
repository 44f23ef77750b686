"""Observables derived from an event log: makespan, task-time statistics,
connected-worker and completed-inference series, eviction accounting.

Everything here is a pure function of the log.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .domain import EventRecord, Outcome

MS = 1000.0


class LogParseError(ValueError):
    def __init__(self, sequence_no: int, reason: str) -> None:
        super().__init__(f"malformed event log at seq {sequence_no}: {reason}")
        self.sequence_no = sequence_no


@dataclass(frozen=True)
class TimeStats:
    mean: float = 0.0
    std_dev: float = 0.0
    min: float = 0.0
    max: float = 0.0
    count: int = 0

    @classmethod
    def of(cls, values: Sequence[float]) -> "TimeStats":
        n = len(values)
        if n == 0:
            return cls()
        mean = math.fsum(values) / n
        var = math.fsum((v - mean) ** 2 for v in values) / n
        return cls(mean, math.sqrt(var), min(values), max(values), n)


@dataclass(frozen=True)
class RunSummary:
    makespan: float = 0.0
    task_time_stats: TimeStats = TimeStats()
    task_time_with_context_stats: TimeStats = TimeStats()
    per_inference_time_stats: TimeStats = TimeStats()
    completed_inferences_series: list[tuple[int, int]] = field(default_factory=list)
    connected_workers_series: list[tuple[int, int]] = field(default_factory=list)
    avg_connected_workers: float = 0.0
    evictions: int = 0
    inferences_lost: int = 0
    materializations: int = 0
    completed_tasks: int = 0
    completed_inferences: int = 0
    requeues: int = 0
    status: str = ""
    start_ms: int = 0
    end_ms: int = 0
    task_times: tuple[float, ...] = ()

    def completed_at(self, time_ms: int) -> int:
        """Completed inferences at ``time_ms`` (step function)."""
        count = 0
        for t, c in self.completed_inferences_series:
            if t > time_ms:
                break
            count = c
        return count


def _check(records: Sequence[EventRecord]) -> None:
    last_seq = 0
    last_time = -math.inf
    for rec in records:
        if rec.sequence_no <= last_seq:
            raise LogParseError(rec.sequence_no, "sequence numbers must strictly increase")
        if rec.time < last_time:
            raise LogParseError(rec.sequence_no, "time went backwards")
        last_seq = rec.sequence_no
        last_time = rec.time


def summarize(event_log: Iterable[EventRecord]) -> RunSummary:
    records = list(event_log)
    if not records:
        return RunSummary()
    _check(records)

    start = None
    connected = 0
    conn_series: list[tuple[int, int]] = []
    done_series: list[tuple[int, int]] = []
    done = 0
    tasks_done = 0
    task_times: list[float] = []
    ctx_times: list[float] = []
    per_inf: list[float] = []
    evictions = lost = materializations = requeues = 0
    last_finish = None
    status = ""
    for rec in records:
        kind = rec.kind
        v = rec.values
        if kind == "result":
            if v[3] == Outcome.COMPLETED.value:
                batch = v[4]
                done += batch
                tasks_done += 1
                t = (v[9] - v[8]) / MS
                task_times.append(t)
                ctx_times.append((v[9] - v[6]) / MS)
                per_inf.append(t / batch)
                done_series.append((rec.time, done))
                last_finish = rec.time
        elif kind == "invoke_begin":
            if v[3]:
                materializations += 1
        elif kind == "materialize_begin":
            materializations += 1
        elif kind == "worker_join":
            connected += 1
            conn_series.append((rec.time, connected))
        elif kind in ("worker_evict", "worker_retire"):
            connected -= 1
            conn_series.append((rec.time, connected))
            if kind == "worker_evict":
                evictions += 1
                lost += v[3]
        elif kind == "requeue":
            requeues += 1
        elif kind == "dispatch_open" and start is None:
            start = rec.time
        elif kind == "run_end":
            status = v[0]
    if start is None:
        start = records[0].time
    end = records[-1].time
    makespan = (last_finish - start) / MS if last_finish is not None else 0.0
    return RunSummary(
        makespan=makespan,
        task_time_stats=TimeStats.of(task_times),
        task_time_with_context_stats=TimeStats.of(ctx_times),
        per_inference_time_stats=TimeStats.of(per_inf),
        completed_inferences_series=done_series,
        connected_workers_series=conn_series,
        avg_connected_workers=_time_weighted(conn_series, start, end),
        evictions=evictions,
        inferences_lost=lost,
        materializations=materializations,
        completed_tasks=tasks_done,
        completed_inferences=done,
        requeues=requeues,
        status=status,
        start_ms=start,
        end_ms=end,
        task_times=tuple(task_times),
    )


def _time_weighted(series: list[tuple[int, int]], start: int, end: int) -> float:
    if end <= start:
        return float(series[-1][1]) if series else 0.0
    level = 0
    area = 0.0
    prev = start
    for t, count in series:
        if t > start:
            area += level * (min(t, end) - prev)
            prev = min(t, end)
        level = count
    area += level * (end - prev)
    return area / (end - start)


@dataclass(frozen=True)
class Histogram:
    buckets: list[tuple[float, int]]
    trimmed: int
    bucket_width: float

    @property
    def total(self) -> int:
        return sum(c for _, c in self.buckets)


def histogram(task_times: Iterable[float], bucket_width: float, trim_above: float = math.inf) -> Histogram:
    """Fixed-width buckets ``[k*w, (k+1)*w)``; values above ``trim_above`` are counted apart."""
    if not bucket_width > 0:
        raise ValueError("bucket_width must be > 0")
    counts: dict[int, int] = {}
    trimmed = 0
    for v in task_times:
        if v > trim_above:
            trimmed += 1
            continue
        k = math.floor(v / bucket_width)
        counts[k] = counts.get(k, 0) + 1
    return Histogram([(k * bucket_width, counts[k]) for k in sorted(counts)], trimmed, bucket_width)


# ------------------------------------------------------------------ CSV output

SUMMARY_COLUMNS = (
    "run_id",
    "status",
    "makespan_s",
    "task_mean_s",
    "task_std_s",
    "task_min_s",
    "task_max_s",
    "ctx_task_mean_s",
    "ctx_task_std_s",
    "per_inference_mean_s",
    "avg_connected_workers",
    "completed_tasks",
    "completed_inferences",
    "evictions",
    "inferences_lost",
    "requeues",
    "materializations",
)


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def summary_row(run_id: str, s: RunSummary) -> list[str]:
    return [
        run_id,
        s.status,
        _fmt(s.makespan),
        _fmt(s.task_time_stats.mean),
        _fmt(s.task_time_stats.std_dev),
        _fmt(s.task_time_stats.min),
        _fmt(s.task_time_stats.max),
        _fmt(s.task_time_with_context_stats.mean),
        _fmt(s.task_time_with_context_stats.std_dev),
        _fmt(s.per_inference_time_stats.mean),
        _fmt(s.avg_connected_workers),
        str(s.completed_tasks),
        str(s.completed_inferences),
        str(s.evictions),
        str(s.inferences_lost),
        str(s.requeues),
        str(s.materializations),
    ]


def summary_csv(rows: Iterable[tuple[str, RunSummary]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for run_id, s in rows:
        w.writerow(summary_row(run_id, s))
    return buf.getvalue()


def series_csv(rows: Iterable[tuple[str, RunSummary]]) -> str:
    """Long format: run_id,time_ms,metric,value."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("run_id", "time_ms", "metric", "value"))
    for run_id, s in rows:
        for t, c in s.connected_workers_series:
            w.writerow((run_id, t, "connected_workers", c))
        for t, c in s.completed_inferences_series:
            w.writerow((run_id, t, "completed_inferences", c))
    return buf.getvalue()
