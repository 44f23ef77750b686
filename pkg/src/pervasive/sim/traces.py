"""Availability traces: scripted drains, stochastic churn and CSV replay.

CSV format, one event per line after the header::

    time_ms,action,worker_id,gpu_model,speed_factor

``action`` is ``join``, ``evict`` or ``drain``. An ``evict`` row with an
empty ``worker_id`` names a selection rule (fastest, slowest, random) in the
``gpu_model`` column. A ``drain`` row carries the rate in workers/minute in
``speed_factor`` and the GPU-model priority list, ``|``-separated, in
``gpu_model``.
"""

from __future__ import annotations

import csv
import io
import random
from pathlib import Path
from typing import Sequence

from ..domain import (
    AvailabilityTrace,
    DrainStart,
    GpuModel,
    TraceEvent,
    WorkerEvict,
    WorkerJoin,
    WorkerProfile,
)
from .calibration import GPU_CATALOG, Calibration, load_constants

CSV_HEADER = ("time_ms", "action", "worker_id", "gpu_model", "speed_factor")
MINUTE_MS = 60_000


def make_drain_trace(
    pool: Sequence[WorkerProfile],
    warmup: float,
    rate: float,
    ordering: str | Sequence[str] = "speed-descending",
) -> AvailabilityTrace:
    """All workers join at t=0; after ``warmup`` minutes one leaves every 1/rate minutes.

    ``ordering`` is ``"speed-descending"`` (fastest first) or a GPU-model
    priority list; ties break on lower worker id.
    """
    if not rate > 0:
        raise ValueError("drain rate must be > 0")
    if isinstance(ordering, str):
        if ordering != "speed-descending":
            raise ValueError(f"unknown ordering {ordering!r}")
        key = lambda p: (-p.gpu.speed_factor, p.worker_id)  # noqa: E731
    else:
        rank = {name: i for i, name in enumerate(ordering)}
        key = lambda p: (rank.get(p.gpu.model_name, len(rank)), -p.gpu.speed_factor, p.worker_id)  # noqa: E731
    events = [TraceEvent(0, WorkerJoin(p)) for p in pool]
    start = int(round(warmup * MINUTE_MS))
    step = MINUTE_MS / rate
    for i, p in enumerate(sorted(pool, key=key)):
        events.append(TraceEvent(start + int(round(i * step)), WorkerEvict(p.worker_id)))
    return AvailabilityTrace(tuple(events))


def _cluster_mix(cal: Calibration) -> tuple[list[GpuModel], list[int]]:
    models = [GpuModel(n, cal.gpu_speed[n], y) for n, y, _ in GPU_CATALOG]
    weights = [c for _, _, c in GPU_CATALOG]
    return models, weights


def make_fluctuating_trace(
    seed: int,
    min_workers: int,
    max_workers: int,
    mean_dwell: float,
    horizon: float = 240.0,
    cal: Calibration | None = None,
) -> AvailabilityTrace:
    """Per-slot two-state renewal process with exponential dwell times.

    ``min_workers`` slots are permanently up; each of the remaining
    ``max_workers - min_workers`` slots alternates up/down with dwell times
    drawn with mean ``mean_dwell`` minutes, until ``horizon`` minutes. Every
    up period is a fresh worker whose GPU is drawn from the cluster mix, so
    the pool size always stays within ``[min_workers, max_workers]``.
    """
    if min_workers > max_workers or min_workers < 0:
        raise ValueError("need 0 <= min_workers <= max_workers")
    cal = cal or load_constants()
    rng = random.Random(seed)
    models, weights = _cluster_mix(cal)
    horizon_ms = int(round(horizon * MINUTE_MS))
    raw: list[tuple[int, int, int, object]] = []  # time, order, slot, action
    next_id = 0

    def new_worker(t: int) -> WorkerProfile:
        nonlocal next_id
        model = rng.choices(models, weights)[0]
        p = WorkerProfile(next_id, model, join_time=t)
        next_id += 1
        return p

    for slot in range(min_workers):
        raw.append((0, 1, slot, WorkerJoin(new_worker(0))))
    for slot in range(min_workers, max_workers):
        t = 0
        up = rng.random() < 0.5
        current: WorkerProfile | None = None
        if up:
            current = new_worker(0)
            raw.append((0, 1, slot, WorkerJoin(current)))
        while True:
            t += max(1, int(round(rng.expovariate(1.0 / mean_dwell) * MINUTE_MS))) if mean_dwell > 0 else horizon_ms
            if t >= horizon_ms:
                break
            if up:
                raw.append((t, 0, slot, WorkerEvict(current.worker_id)))
                current = None
            else:
                current = new_worker(t)
                raw.append((t, 1, slot, WorkerJoin(current)))
            up = not up
    # evictions before joins at equal times keep the pool inside the envelope
    raw.sort(key=lambda r: (r[0], r[1], r[2]))
    return AvailabilityTrace(tuple(TraceEvent(t, act) for t, _, _, act in raw))


def pool_size_series(trace: AvailabilityTrace) -> list[tuple[int, int]]:
    """(time, connected count) after every event, assuming no drains."""
    alive: set[int] = set()
    out = []
    for ev in trace.events:
        act = ev.action
        if isinstance(act, WorkerJoin):
            alive.add(act.profile.worker_id)
        elif isinstance(act, WorkerEvict) and act.worker_id is not None:
            alive.discard(act.worker_id)
        out.append((ev.time, len(alive)))
    return out


def trace_to_csv(trace: AvailabilityTrace) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for ev in trace.events:
        act = ev.action
        if isinstance(act, WorkerJoin):
            p = act.profile
            w.writerow([ev.time, "join", p.worker_id, p.gpu.model_name, repr(p.gpu.speed_factor)])
        elif isinstance(act, WorkerEvict):
            if act.worker_id is not None:
                w.writerow([ev.time, "evict", act.worker_id, "", ""])
            else:
                w.writerow([ev.time, "evict", "", act.rule, ""])
        else:
            w.writerow([ev.time, "drain", "", "|".join(act.ordering), repr(act.rate)])
    return buf.getvalue()


def trace_from_csv(text: str, cal: Calibration | None = None) -> AvailabilityTrace:
    years = {n: y for n, y, _ in GPU_CATALOG}
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(h.strip() for h in header) != CSV_HEADER:
        raise ValueError(f"trace CSV header must be {','.join(CSV_HEADER)}")
    events = []
    for lineno, row in enumerate(reader, start=2):
        if not row or not "".join(row).strip():
            continue
        if len(row) != len(CSV_HEADER):
            raise ValueError(f"line {lineno}: expected {len(CSV_HEADER)} columns")
        time_s, action, wid, model, speed = (c.strip() for c in row)
        t = int(time_s)
        if action == "join":
            if not speed:
                cal = cal or load_constants()
                speed = cal.gpu_speed[model]
            gpu = GpuModel(model, float(speed), years.get(model, 0))
            events.append(TraceEvent(t, WorkerJoin(WorkerProfile(int(wid), gpu, join_time=t))))
        elif action == "evict":
            events.append(TraceEvent(t, WorkerEvict(int(wid)) if wid else WorkerEvict(rule=model)))
        elif action == "drain":
            ordering = tuple(x for x in model.split("|") if x)
            events.append(TraceEvent(t, DrainStart(float(speed), ordering)))
        else:
            raise ValueError(f"line {lineno}: unknown action {action!r}")
    return AvailabilityTrace(tuple(events))


def read_trace_csv(path: str | Path, cal: Calibration | None = None) -> AvailabilityTrace:
    return trace_from_csv(Path(path).read_text(), cal)


def write_trace_csv(trace: AvailabilityTrace, path: str | Path) -> None:
    Path(path).write_text(trace_to_csv(trace))
