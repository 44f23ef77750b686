"""Deterministic discrete-event backend driving the scheduler and worker runtimes."""

from __future__ import annotations

import heapq
import math
import random
from collections import deque
from dataclasses import dataclass
from typing import Any

from ..domain import (
    MANAGER,
    SIMULATOR,
    SOURCE_MANAGER,
    SOURCE_SHARED_FS,
    Blob,
    ContextMode,
    ContextRecipe,
    DrainStart,
    EventLog,
    InvocationResult,
    ObjectKind,
    Outcome,
    ScenarioConfig,
    TaskSpec,
    Timing,
    WorkerEvict,
    WorkerJoin,
    WorkerProfile,
    WorkloadModel,
    validate_scenario,
    worker_actor,
)
from ..metrics import RunSummary, summarize
from ..protocol import ManifestItem
from ..scheduler import Manager, Transfer
from ..worker import StageInFailed, WorkerRuntime
from .workload import invocation_seconds, stage_seconds, to_ms

# heap event codes
_TRACE, _DRAIN, _TRANSFER_DONE, _STAGE_DONE, _LIB_READY, _INVOKE_DONE, _FACTORY = range(7)

COMPLETED = "completed"
STALLED = "stalled"


class InvalidScenario(ValueError):
    def __init__(self, violations: list[str]) -> None:
        super().__init__("; ".join(violations))
        self.violations = violations


def synthetic_recipe(workload: WorkloadModel) -> ContextRecipe:
    """Stand-in recipe. Blobs are small tokens; real sizes live in the workload."""
    return ContextRecipe(
        Blob("function_code", b"def infer_model(context, batch): ..."),
        Blob("dependency_package", f"package:{workload.package_size}GB".encode()),
        Blob("context_code", b"def load_model(path): ..."),
        (Blob("model", f"model:{workload.model_size}GB".encode()),),
    )


def recipe_manifest(recipe: ContextRecipe, workload: WorkloadModel) -> list[ManifestItem]:
    sizes = {
        ObjectKind.DEPENDENCY_PACKAGE: int(workload.package_size * 1e9),
        ObjectKind.CONTEXT_INPUT: int(workload.model_size * 1e9),
    }
    return [ManifestItem(oid, kind, sizes.get(kind, size)) for oid, kind, size in recipe.objects()]


@dataclass
class SimRun:
    config: ScenarioConfig
    status: str
    results: dict[int, InvocationResult]
    event_log: EventLog
    summary: RunSummary
    workers: dict[int, WorkerRuntime]


class SimEngine:
    def __init__(self, config: ScenarioConfig, check_invariants: bool = False) -> None:
        problems = validate_scenario(config)
        if problems:
            raise InvalidScenario(problems)
        self.config = config
        self.mode = config.context_mode
        self.workload = config.workload
        self.clock = 0
        self.heap: list[tuple] = []
        self._seq = 0
        self._live_events = 0
        self.rng = random.Random(config.seed)
        self.log = EventLog()
        self.manager = Manager(config.transfer_cap, self.log)
        self.check_invariants = check_invariants

        self.recipe = synthetic_recipe(config.workload)
        self.manifest = recipe_manifest(self.recipe, config.workload)
        self.manager.register_recipe(self.recipe.recipe_id, [m.object_id for m in self.manifest])
        self.stage_mb = int(round(sum(m.size for m in self.manifest) / 1e6))
        self.stage_ms = to_ms(stage_seconds(config.workload))
        self.peer_stage_ms = to_ms(stage_seconds(config.workload, peer=True))
        self.load_ms = to_ms(config.workload.t_model_load)

        self.workers: dict[int, WorkerRuntime] = {}
        self.all_workers: dict[int, WorkerRuntime] = {}
        self.supply: deque[WorkerProfile] = deque()
        self.transfers: dict[int, Transfer] = {}
        self.timing: dict[int, list[int]] = {}
        self.open = False
        initial = config.trace.initial_workers()
        if config.factory is not None:
            initial = min(initial, config.factory.max_workers)
        self.needed = max(1, math.ceil(config.start_threshold * initial - 1e-9)) if initial else 1
        self.joined = 0
        self.done = False
        self.status = ""

    # ------------------------------------------------------------ plumbing

    def _push(self, at: int, code: int, *args: Any) -> None:
        self._seq += 1
        heapq.heappush(self.heap, (at, self._seq, code, args))
        if code != _FACTORY:
            self._live_events += 1

    def run(self) -> SimRun:
        cfg = self.config
        self.log.emit(0, SIMULATOR, "scenario", cfg.name, self.mode.value, cfg.batch_size, cfg.total_inferences, cfg.num_tasks)
        for i, ev in enumerate(cfg.trace.events):
            self._push(ev.time, _TRACE, i)
        specs = []
        start = 0
        for i, b in enumerate(cfg.batch_sizes()):
            specs.append(TaskSpec(i, self.recipe.recipe_id, range(start, start + b)))
            start += b
        self.manager.submit_tasks(specs, 0)
        self.total_tasks = len(specs)
        if cfg.factory is not None:
            self._push(0, _FACTORY)

        handlers = {
            _TRACE: self._on_trace,
            _DRAIN: self._on_drain,
            _TRANSFER_DONE: self._on_transfer_done,
            _STAGE_DONE: self._on_stage_done,
            _LIB_READY: self._on_library_ready,
            _INVOKE_DONE: self._on_invoke_done,
            _FACTORY: self._on_factory,
        }
        heap = self.heap
        while heap and not self.done:
            at, _, code, args = heapq.heappop(heap)
            if code != _FACTORY:
                self._live_events -= 1
            elif self._stalled_under_factory():
                break
            if self._cancelled(code, args):
                continue
            self.clock = at
            handlers[code](*args)
            if self.check_invariants:
                self._check()
        if not self.done:
            self.status = STALLED
            self.log.emit(self.clock, SIMULATOR, "run_end", STALLED, len(self.manager.state.results), self.total_tasks)
        return SimRun(cfg, self.status, self.manager.state.results, self.log, summarize(self.log), self.all_workers)

    def _cancelled(self, code: int, args: tuple) -> bool:
        # events of evicted workers and aborted transfers are dropped lazily
        if code == _TRANSFER_DONE:
            return args[0] not in self.transfers
        if code in (_STAGE_DONE, _LIB_READY, _INVOKE_DONE):
            return args[0] not in self.workers
        return False

    def _stalled_under_factory(self) -> bool:
        return self._live_events == 0 and not self.supply and self.manager.connected == 0

    def _check(self) -> None:
        self.manager.check_invariants()
        for rt in self.workers.values():
            assert rt.used_bytes() <= rt.capacity_bytes, "cache over capacity"
            assert rt.state.active_outbound_transfers <= rt.transfer_cap

    # ------------------------------------------------------------ pool

    def _on_trace(self, index: int) -> None:
        act = self.config.trace.events[index].action
        if isinstance(act, WorkerJoin):
            if self.config.factory is not None:
                self.supply.append(act.profile)
            else:
                self._join(act.profile)
        elif isinstance(act, WorkerEvict):
            wid = act.worker_id if act.worker_id is not None else self._select(act.rule)
            if wid is None:
                return
            if wid not in self.workers and self._drop_from_supply(wid):
                return
            self._evict(wid)
        elif isinstance(act, DrainStart):
            self._push(self.clock, _DRAIN, act)

    def _drop_from_supply(self, wid: int) -> bool:
        for p in self.supply:
            if p.worker_id == wid:
                self.supply.remove(p)
                return True
        return False

    def _select(self, rule: str | None) -> int | None:
        if not self.workers:
            return None
        ids = sorted(self.workers)
        speed = {w: self.workers[w].state.profile.gpu.speed_factor for w in ids}
        if rule == "fastest":
            return min(ids, key=lambda w: (-speed[w], w))
        if rule == "slowest":
            return min(ids, key=lambda w: (speed[w], w))
        return self.rng.choice(ids)

    def _on_drain(self, drain: DrainStart) -> None:
        if not self.workers:
            return
        rank = {name: i for i, name in enumerate(drain.ordering)}
        victim = min(
            self.workers.values(),
            key=lambda rt: (
                rank.get(rt.state.profile.gpu.model_name, len(rank)),
                -rt.state.profile.gpu.speed_factor,
                rt.worker_id,
            ),
        )
        self._evict(victim.worker_id)
        if self.workers:
            self._push(self.clock + int(round(60_000 / drain.rate)), _DRAIN, drain)

    def _join(self, profile: WorkerProfile) -> None:
        rt = WorkerRuntime(profile, self.config.transfer_cap)
        self.workers[profile.worker_id] = rt
        self.all_workers[profile.worker_id] = rt
        self.manager.add_worker(profile, self.clock)
        self.joined += 1
        if not self.open and self.joined >= self.needed:
            self.open = True
            self.log.emit(self.clock, MANAGER, "dispatch_open", self.manager.connected)
        self._pump()

    def _evict(self, wid: int) -> None:
        rt = self.workers.pop(wid, None)
        if rt is None:
            self.manager.on_worker_evicted(wid, self.clock)  # logs the race
            return
        rt.evict()
        for tid, tr in list(self.transfers.items()):
            if tr.target == wid:
                del self.transfers[tid]
                src = self.workers.get(tr.source)
                if src is not None:
                    src.close_outbound()
            elif tr.source == wid:
                del self.transfers[tid]
        task_id, aborted = self.manager.on_worker_evicted(wid, self.clock)
        if task_id is not None:
            self.timing.pop(task_id, None)
        for tr in aborted:
            self.log.emit(self.clock, worker_actor(tr.target), "transfer_abort", tr.target, tr.source)
        self._pump()

    def _on_factory(self) -> None:
        policy = self.config.factory
        req = self.manager.factory_adjust(len(self.supply), policy)
        if req.submit or req.retire:
            self.log.emit(self.clock, MANAGER, "factory", req.submit, len(req.retire))
        for wid in req.retire:
            if self.manager.retire_worker(wid, self.clock):
                rt = self.workers.pop(wid)
                rt.evict()
                self.supply.append(rt.state.profile)
        for _ in range(req.submit):
            self._join(self.supply.popleft())
        self._push(self.clock + policy.period_ms, _FACTORY)

    # ------------------------------------------------------------ dispatch

    def _pump(self) -> None:
        if self.manager.pending_stage:
            self._start_transfers()
        if not self.open:
            return
        for task_id, wid in self.manager.match_tasks(self.clock):
            self._dispatch(task_id, wid)

    def _spec(self, task_id: int) -> TaskSpec:
        return self.manager.state.tasks[task_id]

    def _dispatch(self, task_id: int, wid: int) -> None:
        spec = self._spec(task_id)
        now = self.clock
        self.timing[task_id] = [self.manager.state.queued_at[task_id], now, now, now]
        rt = self.workers[wid]
        if self.mode is ContextMode.NAIVE:
            self.log.emit(now, worker_actor(wid), "stage_begin", wid, SOURCE_SHARED_FS, self.stage_mb)
            self._push(now + self.stage_ms, _STAGE_DONE, wid, task_id, spec.attempt)
            return
        if rt.holds_recipe(spec.recipe_id):
            self._context(wid, spec)
            return
        try:
            rt.stage_in(self.manifest, now, spec.recipe_id)
        except StageInFailed as exc:
            self.log.emit(now, worker_actor(wid), "stage_failed", wid, exc.reason)
            t = self.timing.pop(task_id)
            self.manager.on_result(
                InvocationResult(task_id, spec.attempt, Outcome.FAILED, None, Timing(t[0], t[1], now, now, now), wid, exc.reason),
                now,
            )
            self.manager.retire_worker(wid, now)
            self.workers.pop(wid).evict()
            self._pump()
            return
        self.manager.request_stage(wid, spec.recipe_id)
        self._start_transfers()

    def _start_transfers(self) -> None:
        now = self.clock
        for tr in self.manager.assign_transfers():
            if tr.source == SOURCE_MANAGER:
                dur = self.stage_ms
            else:
                denied = self.workers[tr.source].open_outbound(self.manifest[0].object_id)
                assert denied is None, f"peer {tr.source} refused: {denied}"
                dur = self.peer_stage_ms
            self.transfers[tr.transfer_id] = tr
            self.log.emit(now, worker_actor(tr.target), "stage_begin", tr.target, tr.source, self.stage_mb)
            self._push(now + dur, _TRANSFER_DONE, tr.transfer_id)

    def _on_transfer_done(self, transfer_id: int) -> None:
        tr = self.transfers.pop(transfer_id, None)
        if tr is None:
            return
        self.manager.finish_transfer(transfer_id)
        now = self.clock
        if tr.source != SOURCE_MANAGER:
            self.workers[tr.source].close_outbound()
        rt = self.workers[tr.target]
        for item in self.manifest:
            rt.complete_object(item.object_id, now)
        self.log.emit(now, worker_actor(tr.target), "stage_end", tr.target, tr.source)
        task_id = self.manager.state.worker_table[tr.target].running
        if task_id is not None:
            self._context(tr.target, self._spec(task_id))
        self._pump()

    def _on_stage_done(self, wid: int, task_id: int, attempt: int) -> None:
        if wid not in self.workers:
            return
        self.log.emit(self.clock, worker_actor(wid), "stage_end", wid, SOURCE_SHARED_FS)
        self._invoke(wid, self._spec(task_id))

    def _context(self, wid: int, spec: TaskSpec) -> None:
        if self.mode is not ContextMode.PERVASIVE:
            self._invoke(wid, spec)
            return
        rt = self.workers[wid]
        before = rt.context_materializations
        if rt.ensure_library(spec.recipe_id, self.clock) is not None:
            self._invoke(wid, spec)
        elif rt.context_materializations != before:
            self.log.emit(self.clock, worker_actor(wid), "materialize_begin", wid, spec.recipe_id[:12])
            self._push(self.clock + self.load_ms, _LIB_READY, wid, spec.recipe_id)

    def _on_library_ready(self, wid: int, recipe_id: str) -> None:
        rt = self.workers.get(wid)
        if rt is None:
            return
        ready = rt.finish_library(recipe_id, self.clock)
        self.manager.library_ready(wid, rt.library(recipe_id))
        self.log.emit(self.clock, worker_actor(wid), "materialize_end", wid, ready.materialize_ms)
        task_id = self.manager.state.worker_table[wid].running
        if task_id is not None:
            self._invoke(wid, self._spec(task_id))

    def _invoke(self, wid: int, spec: TaskSpec) -> None:
        now = self.clock
        rt = self.workers[wid]
        t = self.timing[spec.task_id]
        t[2] = t[3] = now
        hosted = self.mode is ContextMode.PERVASIVE
        rt.begin_invocation(spec, now, hosted=hosted)
        self.log.emit(now, worker_actor(wid), "invoke_begin", spec.task_id, spec.attempt, wid, int(not hosted))
        dur = to_ms(invocation_seconds(self.workload, self.mode, len(spec.batch), rt.state.profile.gpu.speed_factor))
        self._push(now + dur, _INVOKE_DONE, wid, spec.task_id, spec.attempt)

    def _on_invoke_done(self, wid: int, task_id: int, attempt: int) -> None:
        rt = self.workers.get(wid)
        if rt is None:
            return
        spec = self._spec(task_id)
        now = self.clock
        t = self.timing.pop(task_id)
        timing = Timing(t[0], t[1], t[2], t[3], now)
        result = rt.finish_invocation(spec, tuple(spec.batch), timing, hosted=self.mode is ContextMode.PERVASIVE)
        self.log.emit(now, worker_actor(wid), "invoke_end", task_id, attempt, wid)
        self.manager.on_result(result, now)
        if len(self.manager.state.results) == self.total_tasks:
            self.done = True
            self.status = COMPLETED
            self.log.emit(now, SIMULATOR, "run_end", COMPLETED, self.total_tasks, self.total_tasks)
            return
        self._pump()


def run_scenario(config: ScenarioConfig, check_invariants: bool = False) -> SimRun:
    return SimEngine(config, check_invariants).run()
