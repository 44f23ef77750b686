"""Distribution planner against a brute-force round-count oracle."""

from collections import defaultdict, deque

import pytest

from pervasive.domain import SOURCE_MANAGER, GpuModel, WorkerProfile
from pervasive.scheduler import Manager

RID = "r" * 64


def oracle_rounds(workers: int, cap: int) -> int:
    """Fewest rounds to reach every node, searching every per-round fan-out.

    State is the number of holders (manager included). In one round each
    holder may send to 0..cap nodes, so the next state is any value in
    [h, h + h*cap], clipped to the total.
    """
    total = workers + 1
    seen = {1: 0}
    q = deque([1])
    while q:
        h = q.popleft()
        if h == total:
            return seen[h]
        for nxt in range(h + 1, min(total, h + h * cap) + 1):
            if nxt not in seen:
                seen[nxt] = seen[h] + 1
                q.append(nxt)
    return seen[total]


def plan(workers: int, cap: int):
    m = Manager(cap)
    m.register_recipe(RID, ["o" * 64])
    for w in range(workers):
        m.add_worker(WorkerProfile(w, GpuModel("g", 1.0)), 0)
    return m.plan_context_distribution(RID, range(workers))


def check_plan(directives, workers, cap):
    holders = {SOURCE_MANAGER}
    by_round = defaultdict(list)
    for d in directives:
        by_round[d.round].append(d)
    received = set()
    for rnd in sorted(by_round):
        sends = defaultdict(int)
        new = set()
        for d in by_round[rnd]:
            assert d.source in holders, "source did not hold the recipe yet"
            assert d.target not in holders and d.target not in received
            sends[d.source] += 1
            new.add(d.target)
            received.add(d.target)
        assert max(sends.values()) <= cap
        holders |= new
    assert received == set(range(workers))


def test_known_examples():
    assert oracle_rounds(1, 3) == 1
    assert oracle_rounds(13, 3) == 2
    assert oracle_rounds(20, 1) == 5
    assert len(plan(1, 3)) == 1


@pytest.mark.parametrize("cap", [1, 2, 3, 4])
def test_planner_matches_oracle(cap):
    for w in range(1, 65):
        directives = plan(w, cap)
        check_plan(directives, w, cap)
        rounds = max(d.round for d in directives) + 1
        assert rounds == oracle_rounds(w, cap), (w, cap)


def test_holders_skip_transfer():
    m = Manager(3)
    m.register_recipe(RID, ["o" * 64])
    for w in range(4):
        m.add_worker(WorkerProfile(w, GpuModel("g", 1.0)), 0)
    m.cache_ack(2, "o" * 64)
    directives = m.plan_context_distribution(RID, range(4))
    assert {d.target for d in directives} == {0, 1, 3}
    assert directives[0].round == 0
