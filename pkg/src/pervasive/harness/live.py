"""Live mode: a real manager and worker processes on loopback.

The manager runs the same :class:`~pervasive.scheduler.Manager` the simulator
uses, speaks the wire protocol to worker subprocesses and serves the recipe
objects as the root of the distribution tree. Workload times are divided by
``LIVE_SCALE`` so a run finishes in seconds.
"""

from __future__ import annotations

import asyncio
import hashlib
import math
import os
import random
import subprocess
import sys
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

from ..domain import (
    MANAGER,
    SOURCE_MANAGER,
    Blob,
    ContextMode,
    ContextRecipe,
    EventLog,
    LibraryPhase,
    LibraryState,
    TaskSpec,
    Timing,
    worker_actor,
)
from ..metrics import summarize
from ..protocol import (
    CacheAck,
    FetchDenied,
    Invoke,
    Joined,
    LibraryReady,
    ManifestItem,
    MaterializeContext,
    ProtocolError,
    Result,
    RetireWorker,
    StageIn,
    StageInFailed,
    TransferDone,
    chunk_stream,
    encode_frame,
    read_message,
)
from ..scheduler import Manager
from .live_worker import serve_fetches

LIVE_SCALE = 1000  # every workload time constant is divided by this in live mode

FUNCTION_CODE = b"""
import hashlib

def infer_model(context, batch):
    return [hashlib.sha256(context + item).digest()[:8] for item in batch]
"""

CONTEXT_CODE = b"""
import hashlib

def load_model(model):
    return hashlib.sha256(model).digest()
"""

COMPLETED, STALLED, TIMEOUT = "completed", "stalled", "timeout"


def live_recipe(size_gb: float = 3.7) -> ContextRecipe:
    """Real blobs, sized like the calibrated artifacts divided by ``LIVE_SCALE``."""
    n = int(size_gb * 1e9 / LIVE_SCALE)
    rng = random.Random(0)
    return ContextRecipe(
        Blob("function_code", FUNCTION_CODE),
        Blob("dependency_package", rng.randbytes(n)),
        Blob("context_code", CONTEXT_CODE),
        (Blob("model", rng.randbytes(n)),),
    )


def expected_output(recipe: ContextRecipe, item: bytes) -> bytes:
    model = recipe.context_inputs[0].data
    return hashlib.sha256(hashlib.sha256(model).digest() + item).digest()[:8]


@dataclass
class LiveReport:
    status: str
    tasks: int
    completed: int
    materializations: int
    per_worker_materializations: dict[int, int]
    requeues: int
    stale_results: int
    killed: list[int]
    exactly_once: bool
    wall_s: float
    event_log: EventLog
    worker_logs: dict[int, str] = field(default_factory=dict)
    problems: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.status == COMPLETED and self.exactly_once and not self.problems

    def render(self) -> str:
        lines = [
            f"status: {self.status}",
            f"tasks completed: {self.completed}/{self.tasks}",
            f"materializations: {self.materializations} {self.per_worker_materializations}",
            f"requeues: {self.requeues}  stale results: {self.stale_results}  killed: {self.killed}",
            f"exactly-once: {self.exactly_once}",
            f"wall: {self.wall_s:.2f} s",
        ]
        lines += [f"problem: {p}" for p in self.problems]
        lines.append("PASS" if self.passed else "FAIL")
        return "\n".join(lines)


class LiveManager:
    def __init__(self, workers: int, tasks: int, batch: int, mode: ContextMode, kill_at: float | None, workdir: Path):
        self.n_workers = workers
        self.mode = mode
        self.kill_at = kill_at
        self.workdir = workdir
        self.log = EventLog()
        self.manager = Manager(3, self.log)
        self.recipe = live_recipe()
        self.blobs = {b.object_id: b.data for b in self.recipe.blobs()}
        names = {b.object_id: b.name for b in self.recipe.blobs()}
        self.manifest_items = [ManifestItem(oid, kind, size, name=names[oid]) for oid, kind, size in self.recipe.objects()]
        self.manager.register_recipe(self.recipe.recipe_id, self.blobs)
        self.specs = [
            TaskSpec(i, self.recipe.recipe_id, tuple(b"claim-%d" % (i * batch + j) for j in range(batch)))
            for i in range(tasks)
        ]
        self.t0 = time.monotonic()
        self.inbox: asyncio.Queue = asyncio.Queue()
        self.writers: dict[int, asyncio.StreamWriter] = {}
        self.procs: dict[int, subprocess.Popen] = {}
        self.joined: set[int] = set()
        self.gone: set[int] = set()
        self.killed: list[int] = []
        self.started: dict[int, int] = {}
        self.open = False
        self.needed = max(1, math.ceil(0.95 * workers - 1e-9))
        self.object_addr = ""
        self.accepted: dict[int, int] = {}

    def now(self) -> int:
        return int((time.monotonic() - self.t0) * 1000)

    # ------------------------------------------------------------ networking

    def _serve_object(self, object_id: str):
        data = self.blobs.get(object_id)
        if data is None:
            return FetchDenied("absent")
        return chunk_stream(object_id, data)

    async def _on_worker_conn(self, reader, writer) -> None:
        try:
            hello = await read_message(reader)
        except ProtocolError:
            writer.close()
            return
        if not isinstance(hello, Joined):
            writer.close()
            return
        wid = hello.profile.worker_id
        self.writers[wid] = writer
        await self.inbox.put((wid, hello))
        try:
            while (msg := await read_message(reader)) is not None:
                await self.inbox.put((wid, msg))
        except (ConnectionError, ProtocolError, asyncio.IncompleteReadError):
            pass
        await self.inbox.put((wid, None))

    def send(self, wid: int, msg) -> None:
        w = self.writers.get(wid)
        if w is not None and wid not in self.gone:
            w.write(encode_frame(msg))

    def spawn(self, wid: int, addr: str) -> None:
        cache = self.workdir / f"worker-{wid}"
        cache.mkdir(parents=True, exist_ok=True)
        err = open(self.workdir / f"worker-{wid}.log", "wb")
        cmd = [
            sys.executable, "-m", "pervasive.harness.live_worker",
            "--manager", addr, "--worker-id", str(wid), "--cache-dir", str(cache),
            "--mode", self.mode.value, "--scale", str(LIVE_SCALE),
        ]
        self.procs[wid] = subprocess.Popen(cmd, stdout=err, stderr=subprocess.STDOUT)
        err.close()

    # ------------------------------------------------------------ scheduling

    def pump(self) -> list[int]:
        mgr = self.manager
        self.start_transfers()
        if not self.open:
            return []
        dispatched = []
        for task_id, wid in mgr.match_tasks(self.now()):
            dispatched.append(wid)
            if mgr.holds_recipe(wid, self.recipe.recipe_id):
                self.context(wid)
            else:
                mgr.request_stage(wid, self.recipe.recipe_id)
        self.start_transfers()
        return dispatched

    def start_transfers(self) -> None:
        mgr = self.manager
        for tr in mgr.assign_transfers():
            if tr.source == SOURCE_MANAGER:
                addr = self.object_addr
            else:
                addr = mgr.state.worker_table[tr.source].address
            items = tuple(ManifestItem(m.object_id, m.kind, m.size, addr, m.name) for m in self.manifest_items)
            self.log.emit(self.now(), worker_actor(tr.target), "stage_begin", tr.target, tr.source, sum(m.size for m in items) // 1_000_000)
            self.send(tr.target, StageIn(tr.recipe_id, items))

    def context(self, wid: int) -> None:
        entry = self.manager.state.worker_table[wid]
        rid = self.recipe.recipe_id
        lib = entry.libraries.get(rid)
        if self.mode is ContextMode.PERVASIVE and (lib is None or lib.state is not LibraryPhase.READY):
            if lib is None:
                entry.libraries[rid] = LibraryState(f"lib-{wid}", rid, LibraryPhase.MATERIALIZING, self.now())
                self.log.emit(self.now(), worker_actor(wid), "materialize_begin", wid, rid[:12])
                self.send(wid, MaterializeContext(rid))
            return
        self.invoke(wid)

    def invoke(self, wid: int) -> None:
        mgr = self.manager
        task_id = mgr.state.worker_table[wid].running
        if task_id is None:
            return
        spec = mgr.state.tasks[task_id]
        self.started[task_id] = self.now()
        hosted = self.mode is ContextMode.PERVASIVE
        self.log.emit(self.now(), worker_actor(wid), "invoke_begin", task_id, spec.attempt, wid, int(not hosted))
        self.send(wid, Invoke(task_id, spec.attempt, spec.recipe_id, tuple(spec.batch)))

    def evict(self, wid: int) -> None:
        if wid in self.gone:
            return
        self.gone.add(wid)
        _, aborted = self.manager.on_worker_evicted(wid, self.now())
        for tr in aborted:
            self.log.emit(self.now(), worker_actor(tr.target), "transfer_abort", tr.target, tr.source)
        self.pump()

    def hard_kill(self, wid: int) -> None:
        proc = self.procs.get(wid)
        if proc is not None:
            proc.kill()  # SIGKILL: no cleanup window
        self.killed.append(wid)
        self.evict(wid)

    def transfer_of(self, wid: int):
        for tr in self.manager.transfers.values():
            if tr.target == wid:
                return tr
        return None

    def handle(self, wid: int, msg) -> None:
        mgr = self.manager
        now = self.now()
        if msg is None:
            self.evict(wid)
            return
        if isinstance(msg, Joined):
            mgr.add_worker(msg.profile, now, msg.address)
            self.joined.add(wid)
            if not self.open and len(self.joined) >= self.needed:
                self.open = True
                self.log.emit(now, MANAGER, "dispatch_open", mgr.connected)
            self.pump()
            return
        if isinstance(msg, Result):
            self.on_result(wid, msg)
            return
        if wid in self.gone:
            return
        if isinstance(msg, CacheAck):
            mgr.cache_ack(wid, msg.object_id)
        elif isinstance(msg, TransferDone):
            tr = self.transfer_of(wid)
            if tr is not None:
                mgr.finish_transfer(tr.transfer_id)
                self.log.emit(now, worker_actor(wid), "stage_end", wid, tr.source)
            if mgr.state.worker_table[wid].running is not None:
                self.context(wid)
            self.pump()
        elif isinstance(msg, StageInFailed):
            tr = self.transfer_of(wid)
            self.log.emit(now, worker_actor(wid), "stage_failed", wid, msg.reason)
            if tr is not None:
                mgr.fail_transfer(tr.transfer_id)
            self.pump()
        elif isinstance(msg, LibraryReady):
            entry = mgr.state.worker_table[wid]
            lib = entry.libraries[msg.recipe_id]
            mgr.library_ready(wid, LibraryState(lib.library_id, msg.recipe_id, LibraryPhase.READY, lib.materialize_start, now))
            self.log.emit(now, worker_actor(wid), "materialize_end", wid, msg.materialize_ms)
            self.invoke(wid)

    def on_result(self, wid: int, msg: Result) -> None:
        mgr = self.manager
        now = self.now()
        r = msg.result
        st = mgr.state
        if r.task_id in st.queued_at and r.task_id in st.dispatched_at and wid not in self.gone:
            start = self.started.get(r.task_id, now)
            timing = Timing(st.queued_at[r.task_id], st.dispatched_at[r.task_id], start, start, max(now, start))
            r = type(r)(r.task_id, r.attempt, r.outcome, r.outputs, timing, r.executed_on, r.reason)
            self.log.emit(now, worker_actor(wid), "invoke_end", r.task_id, r.attempt, wid)
        if r.executed_on != wid:
            return
        if mgr.on_result(r, now) and r.outputs is not None:
            self.accepted[r.task_id] = self.accepted.get(r.task_id, 0) + 1
        dispatched = self.pump()
        done = len(st.results)
        if self.kill_at is not None and not self.killed and done >= self.kill_at * len(self.specs):
            running = [w for w in dispatched if mgr.state.worker_table.get(w) and mgr.state.worker_table[w].running is not None]
            running = running or sorted(w for w, e in mgr.state.worker_table.items() if e.running is not None)
            if running:
                self.hard_kill(running[0])

    def stalled(self) -> bool:
        if self.manager.connected:
            return False
        waiting = [w for w, p in self.procs.items() if w not in self.joined and p.poll() is None]
        return not waiting

    # ------------------------------------------------------------ main loop

    async def run(self) -> str:
        objects = await asyncio.start_server(lambda r, w: serve_fetches(r, w, self._serve_object), "127.0.0.1", 0)
        self.object_addr = "127.0.0.1:%d" % objects.sockets[0].getsockname()[1]
        control = await asyncio.start_server(self._on_worker_conn, "127.0.0.1", 0)
        addr = "127.0.0.1:%d" % control.sockets[0].getsockname()[1]
        self.log.emit(0, "sim", "scenario", "live-smoke", self.mode.value, len(self.specs[0].batch) if self.specs else 0,
                      sum(len(s.batch) for s in self.specs), len(self.specs))
        self.manager.submit_tasks(self.specs, self.now())
        for wid in range(self.n_workers):
            self.spawn(wid, addr)
        status = STALLED
        try:
            while len(self.manager.state.results) < len(self.specs):
                if self.stalled():
                    break
                try:
                    wid, msg = await asyncio.wait_for(self.inbox.get(), 0.25)
                except asyncio.TimeoutError:
                    continue
                self.handle(wid, msg)
                for w in list(self.writers):
                    if w not in self.gone:
                        try:
                            await self.writers[w].drain()
                        except ConnectionError:
                            pass
            else:
                status = COMPLETED
            self.log.emit(self.now(), "sim", "run_end", status, len(self.manager.state.results), len(self.specs))
            return status
        finally:
            for wid in list(self.writers):
                self.send(wid, RetireWorker())
            control.close()
            objects.close()

    def shutdown(self) -> None:
        deadline = time.monotonic() + 5
        for proc in self.procs.values():
            try:
                proc.wait(max(0.01, deadline - time.monotonic()))
            except subprocess.TimeoutExpired:
                proc.kill()
                proc.wait()


def live_smoke(
    workers: int = 3,
    tasks: int = 100,
    batch: int = 1,
    mode: str | ContextMode = ContextMode.PERVASIVE,
    kill_at: float | None = 0.5,
    timeout: float = 60.0,
    workdir: str | Path | None = None,
) -> LiveReport:
    """Run a manager plus ``workers`` worker processes; optionally SIGKILL one mid-run."""
    mode = ContextMode(mode)
    if mode is ContextMode.NAIVE:
        raise ValueError("live mode supports partial and pervasive context only")
    tmp = None
    if workdir is None:
        tmp = tempfile.TemporaryDirectory(prefix="pervasive-live-")
        workdir = tmp.name
    workdir = Path(workdir)
    t0 = time.monotonic()
    lm = None

    async def main() -> str:
        nonlocal lm
        lm = LiveManager(workers, tasks, batch, mode, kill_at, workdir)
        return await lm.run()

    env_path = os.environ.get("PYTHONPATH", "")
    src = str(Path(__file__).resolve().parents[2])
    os.environ["PYTHONPATH"] = src + (os.pathsep + env_path if env_path else "")
    try:
        try:
            status = asyncio.run(asyncio.wait_for(main(), timeout))
        except asyncio.TimeoutError:
            status = TIMEOUT
        finally:
            if lm is not None:
                lm.shutdown()
        report = _report(lm, status, time.monotonic() - t0, workdir)
    finally:
        if env_path:
            os.environ["PYTHONPATH"] = env_path
        else:
            os.environ.pop("PYTHONPATH", None)
        if tmp is not None:
            tmp.cleanup()
    return report


def _report(lm: LiveManager, status: str, wall: float, workdir: Path) -> LiveReport:
    log = lm.log
    summary = summarize(log)
    per_worker: dict[int, int] = {w: 0 for w in sorted(lm.joined)}
    for rec in log.of_kind("materialize_begin"):
        per_worker[rec.values[0]] = per_worker.get(rec.values[0], 0) + 1
    for rec in log.of_kind("invoke_begin"):
        if rec.values[3]:
            per_worker[rec.values[2]] = per_worker.get(rec.values[2], 0) + 1
    problems = []
    results = lm.manager.state.results
    ok = len(results) == len(lm.specs) and all(lm.accepted.get(s.task_id) == 1 for s in lm.specs)
    for spec in lm.specs:
        r = results.get(spec.task_id)
        if r is not None and tuple(r.outputs) != tuple(expected_output(lm.recipe, x) for x in spec.batch):
            ok = False
            problems.append(f"task {spec.task_id}: wrong outputs")
    if status != COMPLETED:
        problems.append(f"run ended {status}")
    logs = {}
    for wid in lm.procs:
        p = workdir / f"worker-{wid}.log"
        if p.exists():
            logs[wid] = p.read_text(errors="replace")[-2000:]
    return LiveReport(
        status=status,
        tasks=len(lm.specs),
        completed=len(results),
        materializations=summary.materializations,
        per_worker_materializations=per_worker,
        requeues=summary.requeues,
        stale_results=len(log.of_kind("stale_result")),
        killed=list(lm.killed),
        exactly_once=ok,
        wall_s=wall,
        event_log=log,
        worker_logs=logs,
        problems=problems,
    )
