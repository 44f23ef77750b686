"""Core data model shared by the scheduler, worker runtime, simulator and harness.

Engine time is integer milliseconds everywhere. All value types are frozen
dataclasses; state machines elsewhere derive new values with
``dataclasses.replace``.
"""

from __future__ import annotations

import enum
import hashlib
import math
import struct
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Any, NamedTuple, Sequence, Union

RECIPE_MAGIC = b"PCRC"
RECIPE_VERSION = 1

# element kind tags in the canonical recipe encoding
TAG_FUNCTION_CODE = 0x01
TAG_DEPENDENCY_PACKAGE = 0x02
TAG_CONTEXT_CODE = 0x03
TAG_CONTEXT_INPUT = 0x04

MB = 1
GB_IN_MB = 1000


class ContextMode(str, enum.Enum):
    NAIVE = "naive"
    PARTIAL = "partial"
    PERVASIVE = "pervasive"


class Outcome(str, enum.Enum):
    COMPLETED = "completed"
    EVICTED = "evicted"
    FAILED = "failed"


class ObjectKind(enum.IntEnum):
    FUNCTION_CODE = 1
    DEPENDENCY_PACKAGE = 2
    CONTEXT_CODE = 3
    CONTEXT_INPUT = 4
    TASK_INPUT = 5
    TASK_OUTPUT = 6


class CacheState(str, enum.Enum):
    TRANSFERRING = "transferring"
    PRESENT = "present"


class LibraryPhase(str, enum.Enum):
    MATERIALIZING = "materializing"
    READY = "ready"
    DEAD = "dead"


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


@dataclass(frozen=True)
class Blob:
    """Opaque named byte blob. ``size`` is the declared size and must match."""

    name: str
    data: bytes
    size: int = -1

    def __post_init__(self) -> None:
        if self.size == -1:
            object.__setattr__(self, "size", len(self.data))
        if self.size < 0 or self.size != len(self.data):
            raise ValueError(
                f"blob {self.name!r}: declared size {self.size} != length {len(self.data)}"
            )

    @cached_property
    def object_id(self) -> str:
        return sha256_hex(self.data)


@dataclass(frozen=True)
class ContextRecipe:
    """The four-element reusable context of a function.

    ``recipe_id`` is derived from the contents; context inputs are sorted by
    name so declaration order does not change identity.
    """

    function_code: Blob = field(compare=False)
    dependency_package: Blob = field(compare=False)
    context_code: Blob = field(compare=False)
    context_inputs: tuple[Blob, ...] = field(default=(), compare=False)
    recipe_id: str = field(default="")

    def __post_init__(self) -> None:
        inputs = tuple(sorted(self.context_inputs, key=lambda b: b.name))
        names = [b.name for b in inputs]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate context input names: {names}")
        object.__setattr__(self, "context_inputs", inputs)
        object.__setattr__(self, "recipe_id", compute_recipe_id(self))

    def encode(self) -> bytes:
        return encode_recipe(self)

    @classmethod
    def decode(cls, data: bytes) -> "ContextRecipe":
        return decode_recipe(data)

    def objects(self) -> list[tuple[str, ObjectKind, int]]:
        """(object_id, kind, size) for every element, in canonical order."""
        out = [
            (self.function_code.object_id, ObjectKind.FUNCTION_CODE, self.function_code.size),
            (
                self.dependency_package.object_id,
                ObjectKind.DEPENDENCY_PACKAGE,
                self.dependency_package.size,
            ),
            (self.context_code.object_id, ObjectKind.CONTEXT_CODE, self.context_code.size),
        ]
        out.extend((b.object_id, ObjectKind.CONTEXT_INPUT, b.size) for b in self.context_inputs)
        return out

    def blobs(self) -> tuple[Blob, ...]:
        return (self.function_code, self.dependency_package, self.context_code, *self.context_inputs)

    def blob_for(self, object_id: str) -> Blob | None:
        for blob in self.blobs():
            if blob.object_id == object_id:
                return blob
        return None


def _put_element(out: bytearray, tag: int, blob: Blob, named: bool) -> None:
    out.append(tag)
    if named:
        name = blob.name.encode("utf-8")
        out += struct.pack(">H", len(name))
        out += name
    out += struct.pack(">Q", len(blob.data))
    out += blob.data


def encode_recipe(recipe: ContextRecipe) -> bytes:
    """Canonical byte layout of a recipe.

    ``magic(4) version(1)`` then function code, dependency package and context
    code as ``tag(1) len(u64) bytes``, then ``count(u32)`` and each context
    input (sorted by name) as ``tag(1) name_len(u16) name len(u64) bytes``.
    All integers are big-endian.
    """
    out = bytearray(RECIPE_MAGIC)
    out.append(RECIPE_VERSION)
    _put_element(out, TAG_FUNCTION_CODE, recipe.function_code, named=False)
    _put_element(out, TAG_DEPENDENCY_PACKAGE, recipe.dependency_package, named=False)
    _put_element(out, TAG_CONTEXT_CODE, recipe.context_code, named=False)
    inputs = sorted(recipe.context_inputs, key=lambda b: b.name)
    out += struct.pack(">I", len(inputs))
    for blob in inputs:
        _put_element(out, TAG_CONTEXT_INPUT, blob, named=True)
    return bytes(out)


def compute_recipe_id(recipe: ContextRecipe) -> str:
    return sha256_hex(encode_recipe(recipe))


def decode_recipe(data: bytes) -> ContextRecipe:
    view = memoryview(data)
    if bytes(view[:4]) != RECIPE_MAGIC or len(view) < 5 or view[4] != RECIPE_VERSION:
        raise ValueError("not a canonical recipe encoding")
    pos = 5

    def element(expected_tag: int, named: bool) -> Blob:
        nonlocal pos
        if pos >= len(view) or view[pos] != expected_tag:
            raise ValueError(f"expected element tag {expected_tag} at offset {pos}")
        pos += 1
        name = ""
        if named:
            (nlen,) = struct.unpack_from(">H", view, pos)
            pos += 2
            name = bytes(view[pos : pos + nlen]).decode("utf-8")
            pos += nlen
        (size,) = struct.unpack_from(">Q", view, pos)
        pos += 8
        if pos + size > len(view):
            raise ValueError("truncated recipe element")
        blob = Blob(name, bytes(view[pos : pos + size]))
        pos += size
        return blob

    try:
        fn = element(TAG_FUNCTION_CODE, False)
        dep = element(TAG_DEPENDENCY_PACKAGE, False)
        ctx = element(TAG_CONTEXT_CODE, False)
        (count,) = struct.unpack_from(">I", view, pos)
        pos += 4
        inputs = tuple(element(TAG_CONTEXT_INPUT, True) for _ in range(count))
    except struct.error as exc:
        raise ValueError(f"truncated recipe encoding: {exc}") from None
    if pos != len(view):
        raise ValueError("trailing bytes after recipe")
    return ContextRecipe(
        Blob("function_code", fn.data),
        Blob("dependency_package", dep.data),
        Blob("context_code", ctx.data),
        inputs,
    )


@dataclass(frozen=True)
class Resources:
    cores: int = 2
    memory: int = 10 * GB_IN_MB
    disk: int = 70 * GB_IN_MB
    gpus: int = 1


TASK_RESOURCES = Resources(cores=2, memory=10 * GB_IN_MB, disk=20 * GB_IN_MB, gpus=1)
WORKER_RESOURCES = Resources(cores=2, memory=10 * GB_IN_MB, disk=70 * GB_IN_MB, gpus=1)


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    recipe_id: str
    batch: Sequence[Any]
    resource_request: Resources = TASK_RESOURCES
    attempt: int = 0

    def __post_init__(self) -> None:
        if len(self.batch) < 1:
            raise ValueError(f"task {self.task_id}: batch must hold at least one input")
        if self.attempt < 0:
            raise ValueError("attempt must be >= 0")

    @property
    def batch_size(self) -> int:
        return len(self.batch)

    def next_attempt(self) -> "TaskSpec":
        return replace(self, attempt=self.attempt + 1)


@dataclass(frozen=True)
class Timing:
    queued_at: int
    dispatched_at: int
    context_ready_at: int
    started_at: int
    finished_at: int

    def is_ordered(self) -> bool:
        return (
            self.queued_at
            <= self.dispatched_at
            <= self.context_ready_at
            <= self.started_at
            <= self.finished_at
        )


@dataclass(frozen=True)
class InvocationResult:
    task_id: int
    attempt: int
    outcome: Outcome
    outputs: tuple | None
    timing: Timing
    executed_on: int
    reason: str = ""

    def __post_init__(self) -> None:
        if (self.outputs is not None) != (self.outcome is Outcome.COMPLETED):
            raise ValueError("outputs are present iff the outcome is Completed")


@dataclass(frozen=True)
class GpuModel:
    model_name: str
    speed_factor: float
    release_year: int = 0

    def __post_init__(self) -> None:
        if not self.speed_factor > 0:
            raise ValueError(f"{self.model_name}: speed_factor must be > 0")


@dataclass(frozen=True)
class WorkerProfile:
    worker_id: int
    gpu: GpuModel
    resources: Resources = WORKER_RESOURCES
    cache_capacity: int = 70 * GB_IN_MB
    join_time: int = 0

    def __post_init__(self) -> None:
        if self.resources.gpus != 1:
            raise ValueError("workers hold exactly one GPU")


@dataclass(frozen=True)
class CacheEntry:
    object_id: str
    kind: ObjectKind
    size: int
    state: CacheState = CacheState.TRANSFERRING
    inserted_at: int = 0

    def present(self, now: int | None = None) -> "CacheEntry":
        if self.state is CacheState.PRESENT:
            raise ValueError(f"{self.object_id[:12]} is already present (immutable)")
        return replace(
            self,
            state=CacheState.PRESENT,
            inserted_at=self.inserted_at if now is None else now,
        )


@dataclass(frozen=True)
class LibraryState:
    library_id: str
    recipe_id: str
    state: LibraryPhase = LibraryPhase.MATERIALIZING
    materialize_start: int = 0
    materialize_end: int | None = None
    invocations_served: int = 0

    def __post_init__(self) -> None:
        if self.invocations_served > 0 and self.state is not LibraryPhase.READY:
            raise ValueError("only a Ready library serves invocations")


@dataclass(frozen=True)
class WorkloadModel:
    """Synthetic stand-in for LLM inference cost. Times in seconds, sizes in GB."""

    t_inf_ref: float = 0.2727
    t_model_load: float = 14.78
    t_software_stage: float = 2.0
    t_model_stage: float = 2.0
    t_peer_stage: float = 1.0
    warm_dispatch_overhead: float = 0.05
    model_size: float = 3.7
    package_size: float = 3.7

    def violations(self) -> list[str]:
        out = []
        for name, value in vars(self).items():
            if not (isinstance(value, (int, float)) and value >= 0 and math.isfinite(value)):
                out.append(f"workload.{name} must be >= 0")
        return out

    def scaled(self, factor: float) -> "WorkloadModel":
        """Divide every time constant by ``factor`` (sizes unchanged)."""
        return replace(
            self,
            t_inf_ref=self.t_inf_ref / factor,
            t_model_load=self.t_model_load / factor,
            t_software_stage=self.t_software_stage / factor,
            t_model_stage=self.t_model_stage / factor,
            t_peer_stage=self.t_peer_stage / factor,
            warm_dispatch_overhead=self.warm_dispatch_overhead / factor,
        )


@dataclass(frozen=True)
class WorkerJoin:
    profile: WorkerProfile


@dataclass(frozen=True)
class WorkerEvict:
    """Evict one worker, either by id or by selection rule (fastest, slowest, random)."""

    worker_id: int | None = None
    rule: str | None = None


@dataclass(frozen=True)
class DrainStart:
    rate: float
    ordering: tuple[str, ...] = ()


TraceAction = Union[WorkerJoin, WorkerEvict, DrainStart]


class TraceEvent(NamedTuple):
    time: int
    action: TraceAction


@dataclass(frozen=True)
class AvailabilityTrace:
    events: tuple[TraceEvent, ...] = ()

    def initial_workers(self) -> int:
        """Number of joins at the first event time."""
        if not self.events:
            return 0
        t0 = self.events[0].time
        return sum(1 for e in self.events if e.time == t0 and isinstance(e.action, WorkerJoin))

    def profiles(self) -> list[WorkerProfile]:
        return [e.action.profile for e in self.events if isinstance(e.action, WorkerJoin)]


@dataclass(frozen=True)
class FactoryPolicy:
    min_workers: int = 0
    max_workers: int = 186
    per_cycle: int = 10
    period_ms: int = 5000


@dataclass(frozen=True)
class ScenarioConfig:
    total_inferences: int
    batch_size: int
    context_mode: ContextMode
    workload: WorkloadModel
    trace: AvailabilityTrace
    transfer_cap: int = 3
    seed: int = 0
    start_threshold: float = 0.95
    name: str = "scenario"
    factory: FactoryPolicy | None = None

    @property
    def num_tasks(self) -> int:
        return -(-self.total_inferences // self.batch_size) if self.batch_size >= 1 else 0

    def batch_sizes(self) -> list[int]:
        full, rest = divmod(self.total_inferences, self.batch_size)
        return [self.batch_size] * full + ([rest] if rest else [])


def validate_scenario(config: ScenarioConfig) -> list[str]:
    """Every invariant violation in ``config``; empty means valid."""
    out: list[str] = []
    if config.batch_size < 1:
        out.append("batch_size ≥ 1")
    if config.total_inferences < 1:
        out.append("total_inferences ≥ 1")
    if not (0 < config.start_threshold <= 1):
        out.append("0 < start_threshold ≤ 1")
    if config.transfer_cap < 1:
        out.append("transfer_cap ≥ 1")
    if not isinstance(config.context_mode, ContextMode):
        out.append(f"unknown context_mode {config.context_mode!r}")
    if not (0 <= config.seed < 2**64):
        out.append("seed must fit in 64 bits")
    out.extend(config.workload.violations())
    times = [e.time for e in config.trace.events]
    if any(b < a for a, b in zip(times, times[1:])):
        out.append("event times non-decreasing")
    if any(t < 0 for t in times):
        out.append("event times ≥ 0")
    seen: set[int] = set()
    for ev in config.trace.events:
        act = ev.action
        if isinstance(act, WorkerJoin):
            if not act.profile.gpu.speed_factor > 0:
                out.append(f"worker {act.profile.worker_id}: speed_factor > 0")
            if act.profile.worker_id in seen:
                out.append(f"worker {act.profile.worker_id} joins twice")
            seen.add(act.profile.worker_id)
        elif isinstance(act, DrainStart) and not act.rate > 0:
            out.append("drain rate > 0")
        elif isinstance(act, WorkerEvict) and act.worker_id is None and act.rule not in EVICT_RULES:
            out.append(f"unknown eviction rule {act.rule!r}")
    if config.factory is not None:
        f = config.factory
        if not (0 <= f.min_workers <= f.max_workers) or f.per_cycle < 1 or f.period_ms < 1:
            out.append("factory policy needs 0 ≤ min ≤ max, per_cycle ≥ 1, period ≥ 1 ms")
    return out


EVICT_RULES = ("fastest", "slowest", "random")


# ---------------------------------------------------------------- event log

MANAGER = "manager"
SIMULATOR = "sim"


def worker_actor(worker_id: int) -> str:
    return f"worker:{worker_id}"


# Field layout per event kind. Records store values positionally.
EVENT_FIELDS: dict[str, tuple[str, ...]] = {
    "scenario": ("name", "mode", "batch_size", "total_inferences", "tasks"),
    "worker_join": ("worker", "gpu", "speed"),
    "worker_evict": ("worker", "task", "attempt", "lost"),
    "worker_retire": ("worker",),
    "unknown_worker": ("worker",),
    "dispatch_open": ("connected",),
    "submit": ("task", "batch"),
    "duplicate_task": ("task",),
    "dispatch": ("task", "attempt", "worker", "tier"),
    "stage_begin": ("worker", "source", "mb"),
    "stage_end": ("worker", "source"),
    "stage_failed": ("worker", "reason"),
    "transfer_abort": ("worker", "source"),
    "materialize_begin": ("worker", "recipe"),
    "materialize_end": ("worker", "ms"),
    # invoke_begin creates the task sandbox; invoke_end hands off output and removes it
    "invoke_begin": ("task", "attempt", "worker", "loads_model"),
    "invoke_end": ("task", "attempt", "worker"),
    "result": (
        "task",
        "attempt",
        "worker",
        "outcome",
        "batch",
        "queued_at",
        "dispatched_at",
        "context_ready_at",
        "started_at",
        "finished_at",
    ),
    "requeue": ("task", "attempt"),
    "stale_result": ("task", "attempt", "worker"),
    "unknown_result": ("task", "attempt"),
    "factory": ("submit", "retire"),
    "run_end": ("status", "completed", "tasks"),
}

# source codes used in stage events
SOURCE_MANAGER = -1
SOURCE_SHARED_FS = -2


class EventRecord(NamedTuple):
    sequence_no: int
    time: int
    actor: str
    kind: str
    values: tuple

    def fields(self) -> dict[str, Any]:
        return dict(zip(EVENT_FIELDS[self.kind], self.values))

    def to_json(self) -> dict[str, Any]:
        return {
            "seq": self.sequence_no,
            "time": self.time,
            "actor": self.actor,
            "event": self.kind,
            **self.fields(),
        }

    @classmethod
    def from_json(cls, row: dict[str, Any]) -> "EventRecord":
        kind = row["event"]
        names = EVENT_FIELDS.get(kind)
        if names is None:
            raise ValueError(f"unknown event kind {kind!r}")
        return cls(int(row["seq"]), int(row["time"]), row["actor"], kind, tuple(row[n] for n in names))


class EventLog:
    """Append-only event stream. Rejects out-of-order timestamps."""

    def __init__(self) -> None:
        self.records: list[EventRecord] = []
        self._seq = 0
        self._last_time = 0

    def emit(self, time: int, actor: str, kind: str, *values: Any) -> EventRecord:
        if time < self._last_time:
            raise ValueError(f"event time went backwards: {time} < {self._last_time}")
        if len(values) != len(EVENT_FIELDS[kind]):
            raise ValueError(f"{kind}: expected fields {EVENT_FIELDS[kind]}, got {values}")
        self._seq += 1
        self._last_time = time
        rec = EventRecord(self._seq, time, actor, kind, values)
        self.records.append(rec)
        return rec

    def __iter__(self):
        return iter(self.records)

    def __len__(self) -> int:
        return len(self.records)

    def of_kind(self, *kinds: str) -> list[EventRecord]:
        return [r for r in self.records if r.kind in kinds]
