import random

from pervasive.domain import (
    SOURCE_MANAGER,
    FactoryPolicy,
    GpuModel,
    InvocationResult,
    LibraryPhase,
    LibraryState,
    Outcome,
    TaskSpec,
    Timing,
    WorkerProfile,
)
from pervasive.scheduler import TIER_COLD, TIER_LIBRARY, Manager

RID = "r" * 64
OBJS = ("a" * 64, "b" * 64)


def manager(cap=3):
    m = Manager(cap)
    m.register_recipe(RID, OBJS)
    return m


def worker(m, wid, speed=1.0, now=0):
    m.add_worker(WorkerProfile(wid, GpuModel(f"g{speed}", speed)), now)


def tasks(n, b=1, start=0):
    return [TaskSpec(i, RID, range(b)) for i in range(start, start + n)]


def done(m, tid, wid, attempt=0, outcome=Outcome.COMPLETED, now=10):
    out = (0,) if outcome is Outcome.COMPLETED else None
    return m.on_result(InvocationResult(tid, attempt, outcome, out, Timing(0, 0, 0, 0, now), wid), now)


# ------------------------------------------------------------------ submission


def test_submit_1500_tasks():
    m = manager()
    m.submit_tasks(tasks(1500, 100), 0)
    assert len(m.state.ready_queue) == 1500


def test_submit_150k_tasks():
    m = manager()
    m.submit_tasks(tasks(150_000), 0)
    assert len(m.state.ready_queue) == 150_000


def test_submit_empty_and_duplicate():
    m = manager()
    m.submit_tasks([], 0)
    assert not m.state.ready_queue and not m.state.tasks
    m.submit_tasks(tasks(2), 0)
    m.submit_tasks(tasks(1), 1)
    assert len(m.state.ready_queue) == 2
    assert len(m.log.of_kind("duplicate_task")) == 1


# ------------------------------------------------------------------ matchmaking


def test_prefers_ready_library():
    m = manager()
    worker(m, 0, 2.0)
    worker(m, 1, 1.0)
    m.library_ready(1, LibraryState("lib", RID, LibraryPhase.READY))
    m.submit_tasks(tasks(1), 0)
    assert m.match_tasks(0) == [(0, 1)]
    assert m.log.of_kind("dispatch")[0].values[3] == TIER_LIBRARY


def test_prefers_faster_cold_worker():
    m = manager()
    worker(m, 0, 1.0)
    worker(m, 1, 2.29)
    m.submit_tasks(tasks(1), 0)
    assert m.match_tasks(0) == [(0, 1)]
    assert m.log.of_kind("dispatch")[0].values[3] == TIER_COLD


def test_cached_beats_cold_and_id_breaks_ties():
    m = manager()
    for w in (3, 1, 2):
        worker(m, w)
    for oid in OBJS:
        m.cache_ack(2, oid)
    m.submit_tasks(tasks(3), 0)
    assert m.match_tasks(0) == [(0, 2), (1, 1), (2, 3)]


def test_no_idle_workers():
    m = manager()
    m.submit_tasks(tasks(3), 0)
    assert m.match_tasks(0) == []
    assert list(m.state.ready_queue) == [0, 1, 2]


def test_one_task_per_worker():
    m = manager()
    worker(m, 0)
    m.submit_tasks(tasks(3), 0)
    assert len(m.match_tasks(0)) == 1
    assert m.match_tasks(1) == []


# ------------------------------------------------------------------ eviction & results


def test_evict_running_task_requeues_at_front():
    m = manager()
    worker(m, 0)
    m.submit_tasks([TaskSpec(42, RID, [1])] + tasks(3), 0)
    m.match_tasks(0)
    tid, _ = m.on_worker_evicted(0, 5)
    assert tid == 42
    assert m.state.ready_queue[0] == 42
    assert m.state.tasks[42].attempt == 1
    ev = m.log.of_kind("worker_evict")[0]
    assert ev.fields() == {"worker": 0, "task": 42, "attempt": 0, "lost": 1}


def test_evict_idle_worker_only_shrinks_table():
    m = manager()
    worker(m, 0)
    worker(m, 1)
    m.submit_tasks(tasks(1), 0)
    before = list(m.state.ready_queue)
    assert m.on_worker_evicted(1, 1) == (None, [])
    assert list(m.state.worker_table) == [0]
    assert list(m.state.ready_queue) == before


def test_unknown_worker_eviction_is_logged():
    m = manager()
    m.on_worker_evicted(9, 0)
    assert m.log.of_kind("unknown_worker")


def test_completion_moves_task_to_results():
    m = manager()
    worker(m, 0)
    m.submit_tasks(tasks(2), 0)
    m.match_tasks(0)
    assert done(m, 0, 0)
    assert 0 in m.state.results and 0 not in m.state.running
    assert m.idle == {0}


def test_stale_result_discarded():
    m = manager()
    worker(m, 0)
    worker(m, 1, 0.5)
    m.submit_tasks(tasks(1), 0)
    m.match_tasks(0)
    m.on_worker_evicted(0, 1)
    m.match_tasks(2)  # attempt 1 on worker 1
    assert not done(m, 0, 0, attempt=0)
    assert m.state.results == {}
    assert m.log.of_kind("stale_result")
    assert done(m, 0, 1, attempt=1)
    assert not done(m, 0, 1, attempt=1)  # a second copy is stale too


def test_unknown_result():
    m = manager()
    assert not done(m, 99, 0)
    assert m.log.of_kind("unknown_result")


def test_failed_result_requeues():
    m = manager()
    worker(m, 0)
    m.submit_tasks(tasks(1), 0)
    m.match_tasks(0)
    done(m, 0, 0, outcome=Outcome.FAILED)
    assert list(m.state.ready_queue) == [0]
    assert m.state.tasks[0].attempt == 1


def test_1500_tasks_all_complete():
    m = manager()
    for w in range(20):
        worker(m, w)
    m.submit_tasks(tasks(1500, 100), 0)
    t = 0
    while m.state.ready_queue or m.state.running:
        for tid, wid in m.match_tasks(t):
            m.on_result(InvocationResult(tid, 0, Outcome.COMPLETED, tuple(range(100)), Timing(t, t, t, t, t + 1), wid), t + 1)
        t += 1
        m.check_invariants()
    assert len(m.state.results) == 1500
    assert sum(len(r.outputs) for r in m.state.results.values()) == 150_000


def test_random_evictions_conserve_tasks():
    rng = random.Random(3)
    m = manager()
    next_id = 0
    for _ in range(5):
        worker(m, next_id)
        next_id += 1
    m.submit_tasks(tasks(200), 0)
    t = 0
    while len(m.state.results) < 200:
        t += 1
        m.match_tasks(t)
        r = rng.random()
        running = sorted(m.state.running.items())
        if r < 0.2 and m.state.worker_table:
            m.on_worker_evicted(rng.choice(sorted(m.state.worker_table)), t)
        elif r < 0.35 or not m.state.worker_table:
            worker(m, next_id, rng.choice([1.0, 0.44]), t)
            next_id += 1
        elif running:
            tid, wid = rng.choice(running)
            done(m, tid, wid, m.state.tasks[tid].attempt, now=t)
        m.check_invariants()
    assert len(m.state.results) == 200


# ------------------------------------------------------------------ transfers


def test_assign_transfers_respects_cap_and_prefers_peers():
    m = manager(cap=2)
    for w in range(6):
        worker(m, w)
    for w in range(1, 6):
        m.request_stage(w, RID)
    first = m.assign_transfers()
    assert [(t.source, t.target) for t in first] == [(SOURCE_MANAGER, 1), (SOURCE_MANAGER, 2)]
    for oid in OBJS:
        m.cache_ack(0, oid)  # worker 0 now holds the recipe
    second = m.assign_transfers()
    assert [(t.source, t.target) for t in second] == [(0, 3), (0, 4)]
    m.check_invariants()
    m.finish_transfer(first[0].transfer_id)
    third = m.assign_transfers()
    assert [(t.source, t.target) for t in third] == [(1, 5)]


def test_evicted_source_reschedules_target():
    m = manager(cap=1)
    worker(m, 0)
    worker(m, 1)
    for oid in OBJS:
        m.cache_ack(0, oid)
    m.request_stage(1, RID)
    (tr,) = m.assign_transfers()
    assert tr.source == 0
    _, aborted = m.on_worker_evicted(0, 1)
    assert aborted == [tr]
    (again,) = m.assign_transfers()
    assert (again.source, again.target) == (SOURCE_MANAGER, 1)


# ------------------------------------------------------------------ factory


def test_factory_at_cap_submits_nothing():
    m = manager()
    for w in range(20):
        worker(m, w)
    m.submit_tasks(tasks(5), 0)
    req = m.factory_adjust(50, FactoryPolicy(0, 20, 10))
    assert req.submit == 0


def test_factory_grows_until_supply_exhausted():
    m = manager()
    for w in range(11):
        worker(m, w)
    m.submit_tasks(tasks(10_000), 0)
    supply = 175
    nid = 11
    while True:
        req = m.factory_adjust(supply, FactoryPolicy(0, 186, 10))
        if not req.submit:
            break
        for _ in range(req.submit):
            worker(m, nid)
            nid += 1
        supply -= req.submit
    assert m.connected == 186 and supply == 0


def test_factory_retires_idle_without_work():
    m = manager()
    for w in range(5):
        worker(m, w)
    req = m.factory_adjust(10, FactoryPolicy(0, 186, 10))
    assert req.submit == 0
    assert sorted(req.retire) == [0, 1, 2, 3, 4]
    for w in req.retire:
        assert m.retire_worker(w, 1)
    assert m.connected == 0
