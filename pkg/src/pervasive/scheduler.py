"""Manager-side scheduling: ready queue, context-aware matchmaking, spanning-tree
context distribution, eviction recovery and the worker factory policy.

The :class:`Manager` is a plain state machine. Callers (the simulator or the
live manager loop) feed it events in order and act on what it returns; it
never does I/O itself.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

from .domain import (
    MANAGER,
    SOURCE_MANAGER,
    EventLog,
    FactoryPolicy,
    InvocationResult,
    LibraryPhase,
    LibraryState,
    Outcome,
    TaskSpec,
    WorkerProfile,
    worker_actor,
)

log = logging.getLogger(__name__)

# matchmaking tiers, lower is better
TIER_LIBRARY = 0
TIER_CACHED = 1
TIER_COLD = 2


@dataclass
class WorkerEntry:
    profile: WorkerProfile
    cache: set[str] = field(default_factory=set)
    libraries: dict[str, LibraryState] = field(default_factory=dict)
    active_transfers: int = 0
    running: int | None = None
    address: str = ""

    @property
    def speed(self) -> float:
        return self.profile.gpu.speed_factor


class Transfer(NamedTuple):
    transfer_id: int
    source: int  # worker id, or SOURCE_MANAGER
    target: int
    recipe_id: str


class TransferDirective(NamedTuple):
    round: int
    source: int
    target: int


@dataclass(frozen=True)
class FactoryRequest:
    submit: int = 0
    retire: tuple[int, ...] = ()


@dataclass
class ManagerState:
    ready_queue: deque[int] = field(default_factory=deque)
    tasks: dict[int, TaskSpec] = field(default_factory=dict)
    queued_at: dict[int, int] = field(default_factory=dict)
    dispatched_at: dict[int, int] = field(default_factory=dict)
    running: dict[int, int] = field(default_factory=dict)
    results: dict[int, InvocationResult] = field(default_factory=dict)
    worker_table: dict[int, WorkerEntry] = field(default_factory=dict)
    event_log: EventLog = field(default_factory=EventLog)


class Manager:
    def __init__(self, transfer_cap: int = 3, event_log: EventLog | None = None) -> None:
        if transfer_cap < 1:
            raise ValueError("transfer cap must be >= 1")
        self.transfer_cap = transfer_cap
        self.state = ManagerState(event_log=event_log if event_log is not None else EventLog())
        self.recipes: dict[str, frozenset[str]] = {}
        self.idle: set[int] = set()
        self.manager_transfers = 0
        self.transfers: dict[int, Transfer] = {}
        self.pending_stage: dict[int, str] = {}  # target worker -> recipe awaiting a source
        self._next_transfer = 0

    # ------------------------------------------------------------ bookkeeping

    @property
    def log(self) -> EventLog:
        return self.state.event_log

    def register_recipe(self, recipe_id: str, object_ids: Iterable[str]) -> None:
        self.recipes[recipe_id] = frozenset(object_ids)

    def add_worker(self, profile: WorkerProfile, now: int, address: str = "") -> WorkerEntry:
        if profile.worker_id in self.state.worker_table:
            raise ValueError(f"worker {profile.worker_id} already connected")
        entry = WorkerEntry(profile, address=address)
        self.state.worker_table[profile.worker_id] = entry
        self.idle.add(profile.worker_id)
        self.log.emit(
            now,
            worker_actor(profile.worker_id),
            "worker_join",
            profile.worker_id,
            profile.gpu.model_name,
            profile.gpu.speed_factor,
        )
        return entry

    @property
    def connected(self) -> int:
        return len(self.state.worker_table)

    def holds_recipe(self, worker_id: int, recipe_id: str) -> bool:
        entry = self.state.worker_table.get(worker_id)
        return entry is not None and self.recipes[recipe_id] <= entry.cache

    def cache_ack(self, worker_id: int, object_id: str) -> None:
        entry = self.state.worker_table.get(worker_id)
        if entry is not None:
            entry.cache.add(object_id)

    def library_ready(self, worker_id: int, library: LibraryState) -> None:
        entry = self.state.worker_table.get(worker_id)
        if entry is not None:
            entry.libraries[library.recipe_id] = library

    # ------------------------------------------------------------ submission

    def submit_tasks(self, specs: Iterable[TaskSpec], now: int) -> list[int]:
        st = self.state
        accepted = []
        for spec in specs:
            if spec.task_id in st.tasks:
                self.log.emit(now, MANAGER, "duplicate_task", spec.task_id)
                continue
            st.tasks[spec.task_id] = spec
            st.queued_at[spec.task_id] = now
            st.ready_queue.append(spec.task_id)
            self.log.emit(now, MANAGER, "submit", spec.task_id, len(spec.batch))
            accepted.append(spec.task_id)
        return accepted

    # ------------------------------------------------------------ matchmaking

    def tier(self, entry: WorkerEntry, recipe_id: str) -> int:
        lib = entry.libraries.get(recipe_id)
        if lib is not None and lib.state is LibraryPhase.READY:
            return TIER_LIBRARY
        objects = self.recipes.get(recipe_id)
        if objects is not None and objects <= entry.cache:
            return TIER_CACHED
        return TIER_COLD

    def match_tasks(self, now: int) -> list[tuple[int, int]]:
        """Greedily assign ready tasks to idle workers, queue order first.

        Per task the best idle worker is: Ready library, then cached recipe,
        then cold; ties go to the faster GPU, then the lower worker id.
        """
        st = self.state
        decisions = []
        table = st.worker_table
        while st.ready_queue and self.idle:
            task_id = st.ready_queue.popleft()
            spec = st.tasks[task_id]
            best = min(
                self.idle,
                key=lambda w: (self.tier(table[w], spec.recipe_id), -table[w].speed, w),
            )
            tier = self.tier(table[best], spec.recipe_id)
            self.idle.discard(best)
            table[best].running = task_id
            st.running[task_id] = best
            st.dispatched_at[task_id] = now
            self.log.emit(now, MANAGER, "dispatch", task_id, spec.attempt, best, tier)
            decisions.append((task_id, best))
        return decisions

    # ------------------------------------------------------------ distribution

    def plan_context_distribution(self, recipe_id: str, targets: Iterable[int]) -> list[TransferDirective]:
        """Round-based spanning-tree plan assuming uniform transfer times.

        Each round every holder (the manager first, then workers by id) sends
        to at most ``transfer_cap`` targets that still lack the recipe.
        Targets that received in a round become sources in the next one.
        """
        remaining = sorted(t for t in set(targets) if not self.holds_recipe(t, recipe_id))
        holders = [SOURCE_MANAGER] + sorted(
            w for w in self.state.worker_table if self.holds_recipe(w, recipe_id)
        )
        plan: list[TransferDirective] = []
        rnd = 0
        while remaining:
            received = []
            for source in holders:
                for _ in range(self.transfer_cap):
                    if not remaining:
                        break
                    target = remaining.pop(0)
                    plan.append(TransferDirective(rnd, source, target))
                    received.append(target)
            holders = [SOURCE_MANAGER] + sorted([h for h in holders if h != SOURCE_MANAGER] + received)
            rnd += 1
        return plan

    def request_stage(self, worker_id: int, recipe_id: str) -> None:
        if any(t.target == worker_id for t in self.transfers.values()):
            return
        self.pending_stage[worker_id] = recipe_id

    def _source_load(self, source: int) -> int:
        if source == SOURCE_MANAGER:
            return self.manager_transfers
        return self.state.worker_table[source].active_transfers

    def assign_transfers(self) -> list[Transfer]:
        """Pair waiting targets (lowest id first) with holders that have a free slot.

        Peers are preferred over the manager; among peers the least loaded,
        then lowest id. Never exceeds the per-node cap.
        """
        started = []
        table = self.state.worker_table
        cap = self.transfer_cap
        for target in sorted(self.pending_stage):
            recipe_id = self.pending_stage[target]
            objects = self.recipes[recipe_id]
            peers = [
                w
                for w, e in table.items()
                if w != target and e.active_transfers < cap and objects <= e.cache
            ]
            if peers:
                source = min(peers, key=lambda w: (table[w].active_transfers, w))
                table[source].active_transfers += 1
            elif self.manager_transfers < cap:
                source = SOURCE_MANAGER
                self.manager_transfers += 1
            else:
                continue
            del self.pending_stage[target]
            tr = Transfer(self._next_transfer, source, target, recipe_id)
            self._next_transfer += 1
            self.transfers[tr.transfer_id] = tr
            started.append(tr)
        return started

    def _release_source(self, source: int) -> None:
        if source == SOURCE_MANAGER:
            self.manager_transfers -= 1
        elif source in self.state.worker_table:
            self.state.worker_table[source].active_transfers -= 1

    def finish_transfer(self, transfer_id: int) -> Transfer | None:
        """Complete a transfer; ``None`` if it was cancelled by an eviction."""
        tr = self.transfers.pop(transfer_id, None)
        if tr is None:
            return None
        self._release_source(tr.source)
        for oid in self.recipes[tr.recipe_id]:
            self.cache_ack(tr.target, oid)
        return tr

    def fail_transfer(self, transfer_id: int) -> Transfer | None:
        """Abort a transfer and put its target back in line for another source."""
        tr = self.transfers.pop(transfer_id, None)
        if tr is None:
            return None
        self._release_source(tr.source)
        if tr.target in self.state.worker_table:
            self.pending_stage[tr.target] = tr.recipe_id
        return tr

    # ------------------------------------------------------------ failures

    def on_worker_evicted(self, worker_id: int, now: int) -> tuple[int | None, list[Transfer]]:
        """Forget an evicted worker and requeue its task at the queue front.

        Returns the requeued task id (or ``None``) and the transfers that were
        sourcing from the worker, which are rescheduled from surviving holders.
        """
        st = self.state
        entry = st.worker_table.pop(worker_id, None)
        if entry is None:
            self.log.emit(now, MANAGER, "unknown_worker", worker_id)
            return None, []
        self.idle.discard(worker_id)
        self.pending_stage.pop(worker_id, None)
        aborted = []
        for tr in list(self.transfers.values()):
            if tr.target == worker_id:
                del self.transfers[tr.transfer_id]
                self._release_source(tr.source)
            elif tr.source == worker_id:
                del self.transfers[tr.transfer_id]
                self.pending_stage[tr.target] = tr.recipe_id
                aborted.append(tr)
        task_id = entry.running
        if task_id is None:
            self.log.emit(now, worker_actor(worker_id), "worker_evict", worker_id, -1, -1, 0)
            return None, aborted
        spec = st.tasks[task_id]
        del st.running[task_id]
        self.log.emit(now, worker_actor(worker_id), "worker_evict", worker_id, task_id, spec.attempt, len(spec.batch))
        self._requeue(spec, now)
        return task_id, aborted

    def _requeue(self, spec: TaskSpec, now: int) -> None:
        st = self.state
        nxt = spec.next_attempt()
        st.tasks[spec.task_id] = nxt
        st.queued_at[spec.task_id] = now
        st.dispatched_at.pop(spec.task_id, None)
        st.ready_queue.appendleft(spec.task_id)
        self.log.emit(now, MANAGER, "requeue", spec.task_id, nxt.attempt)

    def retire_worker(self, worker_id: int, now: int) -> bool:
        """Remove an idle worker at the factory's request."""
        entry = self.state.worker_table.get(worker_id)
        if entry is None or entry.running is not None or entry.active_transfers:
            return False
        del self.state.worker_table[worker_id]
        self.idle.discard(worker_id)
        self.pending_stage.pop(worker_id, None)
        self.log.emit(now, worker_actor(worker_id), "worker_retire", worker_id)
        return True

    # ------------------------------------------------------------ results

    def on_result(self, result: InvocationResult, now: int) -> bool:
        """Record a worker's result. Returns True if it was accepted.

        Results keyed on (task_id, attempt); anything from a superseded attempt
        or a worker that no longer runs the task is discarded and logged.
        """
        st = self.state
        tid = result.task_id
        spec = st.tasks.get(tid)
        if spec is None:
            self.log.emit(now, MANAGER, "unknown_result", tid, result.attempt)
            return False
        if (
            tid in st.results
            or st.running.get(tid) != result.executed_on
            or spec.attempt != result.attempt
        ):
            self.log.emit(now, MANAGER, "stale_result", tid, result.attempt, result.executed_on)
            return False
        wid = st.running.pop(tid)
        entry = st.worker_table.get(wid)
        if entry is not None:
            entry.running = None
            self.idle.add(wid)
        t = result.timing
        self.log.emit(
            now,
            worker_actor(wid),
            "result",
            tid,
            result.attempt,
            wid,
            result.outcome.value,
            len(spec.batch),
            t.queued_at,
            t.dispatched_at,
            t.context_ready_at,
            t.started_at,
            t.finished_at,
        )
        if result.outcome is Outcome.COMPLETED:
            st.results[tid] = result
        else:
            self._requeue(spec, now)
        return True

    # ------------------------------------------------------------ factory

    def factory_adjust(self, availability: int, policy: FactoryPolicy) -> FactoryRequest:
        """Worker submissions and retirements for one factory cycle."""
        min_workers, max_workers, per_cycle = policy.min_workers, policy.max_workers, policy.per_cycle
        connected = self.connected
        submit = 0
        if self.state.ready_queue or connected < min_workers:
            submit = max(0, min(availability, max_workers - connected, per_cycle))
            if connected < min_workers:
                submit = max(submit, min(availability, min_workers - connected))
        retire: list[int] = []
        idle = sorted(self.idle, reverse=True)
        if not self.state.ready_queue:
            surplus = connected - min_workers
        else:
            surplus = connected - max_workers
        if surplus > 0:
            retire = idle[:surplus]
        return FactoryRequest(submit, tuple(retire))

    # ------------------------------------------------------------ checks

    def check_invariants(self) -> None:
        st = self.state
        ready = set(st.ready_queue)
        running = set(st.running)
        done = set(st.results)
        assert len(ready) == len(st.ready_queue), "duplicate task in ready queue"
        assert not (ready & running or ready & done or running & done), "task in two places"
        assert len(ready) + len(running) + len(done) == len(st.tasks), "conservation violated"
        busy = [e.running for e in st.worker_table.values() if e.running is not None]
        assert len(busy) == len(set(busy)), "task on two workers"
        for wid, entry in st.worker_table.items():
            assert entry.active_transfers <= self.transfer_cap, f"worker {wid} over transfer cap"
            if entry.running is not None:
                assert st.running[entry.running] == wid
        assert self.manager_transfers <= self.transfer_cap, "manager over transfer cap"
