"""Worker-side pilot runtime: local cache, library lifecycle, sandboxes, peer
transfer service and eviction.

The runtime is driven step by step. In simulation the engine decides how long
each step takes; in live mode :mod:`pervasive.harness.live` performs the real
I/O and calls the same methods.
"""

from __future__ import annotations

import shutil
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

from .domain import (
    CacheEntry,
    CacheState,
    InvocationResult,
    LibraryPhase,
    LibraryState,
    ObjectKind,
    Outcome,
    TaskSpec,
    Timing,
    WorkerProfile,
)
from .protocol import CHUNK_SIZE, CacheAck, Chunk, FetchDenied, LibraryReady, ManifestItem, chunk_stream

BYTES_PER_MB = 1_000_000


class StageInFailed(Exception):
    def __init__(self, object_id: str, reason: str) -> None:
        super().__init__(f"stage-in of {object_id[:12]} failed: {reason}")
        self.object_id = object_id
        self.reason = reason


class CacheDivergence(RuntimeError):
    """The manager believed objects were cached that the worker does not hold."""


class WorkerGone(RuntimeError):
    pass


@dataclass
class WorkerState:
    profile: WorkerProfile
    cache: dict[str, CacheEntry] = field(default_factory=dict)
    libraries: dict[str, LibraryState] = field(default_factory=dict)
    active_outbound_transfers: int = 0
    current_invocation: tuple[int, int, str] | None = None  # task_id, attempt, sandbox


class OutboundStream:
    """Chunks of one object. Releases the sender's slot once, when exhausted or closed."""

    def __init__(self, object_id: str, data: bytes, chunk_size: int, release) -> None:
        self.object_id = object_id
        self._chunks = chunk_stream(object_id, data, chunk_size)
        self._release = release

    def __iter__(self) -> "OutboundStream":
        return self

    def __next__(self) -> Chunk:
        try:
            return next(self._chunks)
        except StopIteration:
            self.close()
            raise

    def close(self) -> None:
        if self._release is not None:
            self._release()
            self._release = None


class WorkerRuntime:
    def __init__(
        self,
        profile: WorkerProfile,
        transfer_cap: int = 3,
        cache_dir: str | Path | None = None,
    ) -> None:
        self.state = WorkerState(profile)
        self.transfer_cap = transfer_cap
        self.capacity_bytes = profile.cache_capacity * BYTES_PER_MB
        self.cache_dir = Path(cache_dir) if cache_dir is not None else None
        self.recipes: dict[str, tuple[str, ...]] = {}
        self.referenced_outputs: set[str] = set()
        self.context_materializations = 0
        self.sandboxes_created = 0
        self.sandboxes_removed = 0
        self.alive = True
        self._blobs: dict[str, bytes] = {}
        self._library_seq = 0

    @property
    def worker_id(self) -> int:
        return self.state.profile.worker_id

    def _check_alive(self) -> None:
        if not self.alive:
            raise WorkerGone(f"worker {self.worker_id} was evicted")

    # ------------------------------------------------------------ cache

    def used_bytes(self, include_transferring: bool = True) -> int:
        return sum(
            e.size
            for e in self.state.cache.values()
            if include_transferring or e.state is CacheState.PRESENT
        )

    def has_objects(self, object_ids: Iterable[str]) -> bool:
        cache = self.state.cache
        return all(
            (e := cache.get(oid)) is not None and e.state is CacheState.PRESENT for oid in object_ids
        )

    def holds_recipe(self, recipe_id: str) -> bool:
        objs = self.recipes.get(recipe_id)
        return objs is not None and self.has_objects(objs)

    def _make_room(self, needed: int) -> bool:
        free = self.capacity_bytes - self.used_bytes()
        if free >= needed:
            return True
        outputs = sorted(
            (
                e
                for e in self.state.cache.values()
                if e.kind is ObjectKind.TASK_OUTPUT
                and e.state is CacheState.PRESENT
                and e.object_id not in self.referenced_outputs
            ),
            key=lambda e: (e.inserted_at, e.object_id),
        )
        for entry in outputs:
            if free >= needed:
                break
            self._drop(entry.object_id)
            free += entry.size
        return free >= needed

    def _drop(self, object_id: str) -> None:
        self.state.cache.pop(object_id, None)
        self._blobs.pop(object_id, None)
        path = self.object_path(object_id)
        if path is not None and path.exists():
            path.unlink()

    def object_path(self, object_id: str) -> Path | None:
        if self.cache_dir is None:
            return None
        return self.cache_dir / "objects" / object_id[:2] / object_id

    def stage_in(
        self,
        manifest: Iterable[ManifestItem],
        now: int = 0,
        recipe_id: str | None = None,
    ) -> tuple[list[ManifestItem], list[CacheAck]]:
        """Begin staging a manifest.

        Returns the items that still need a transfer (now ``Transferring``)
        and immediate acks for objects already present. Raises
        :class:`StageInFailed` if the cache cannot fit the new objects even
        after dropping unreferenced task outputs.
        """
        self._check_alive()
        manifest = list(manifest)
        if recipe_id is not None:
            self.recipes[recipe_id] = tuple(m.object_id for m in manifest)
        cache = self.state.cache
        acks = []
        todo = []
        for item in manifest:
            entry = cache.get(item.object_id)
            if entry is None:
                todo.append(item)
            elif entry.state is CacheState.PRESENT:
                acks.append(CacheAck(item.object_id))
            else:
                todo.append(item)  # still Transferring from an aborted source
        needed = sum(m.size for m in todo if m.object_id not in cache)
        if needed and not self._make_room(needed):
            first = next(m for m in todo if m.object_id not in cache)
            raise StageInFailed(first.object_id, "cache capacity exhausted")
        for item in todo:
            if item.object_id not in cache:
                cache[item.object_id] = CacheEntry(item.object_id, item.kind, item.size, CacheState.TRANSFERRING, now)
        return todo, acks

    def complete_object(self, object_id: str, now: int = 0, data: bytes | None = None) -> CacheAck:
        """Mark a transferred object Present (and persist it in live mode)."""
        self._check_alive()
        entry = self.state.cache.get(object_id)
        if entry is None:
            raise KeyError(f"object {object_id[:12]} was never staged")
        if entry.state is CacheState.PRESENT:
            return CacheAck(object_id)
        if data is not None:
            path = self.object_path(object_id)
            if path is not None:
                path.parent.mkdir(parents=True, exist_ok=True)
                tmp = path.with_suffix(".part")
                tmp.write_bytes(data)
                tmp.replace(path)
            else:
                self._blobs[object_id] = data
        self.state.cache[object_id] = entry.present(now)
        return CacheAck(object_id)

    def read_object(self, object_id: str) -> bytes:
        if object_id in self._blobs:
            return self._blobs[object_id]
        path = self.object_path(object_id)
        if path is None or not path.exists():
            raise KeyError(object_id)
        return path.read_bytes()

    def store_output(self, object_id: str, size: int, now: int, data: bytes | None = None) -> None:
        if not self._make_room(size):
            raise StageInFailed(object_id, "no room for task output")
        self.state.cache[object_id] = CacheEntry(object_id, ObjectKind.TASK_OUTPUT, size, CacheState.TRANSFERRING, now)
        self.complete_object(object_id, now, data)

    # ------------------------------------------------------------ library

    def ensure_library(self, recipe_id: str, now: int = 0) -> LibraryReady | None:
        """LibraryReady if a Ready library exists, else start one (once).

        Returns ``None`` while materialization is in progress; the caller
        finishes it with :meth:`finish_library`.
        """
        self._check_alive()
        lib = self.state.libraries.get(recipe_id)
        if lib is not None and lib.state is LibraryPhase.READY:
            return LibraryReady(recipe_id, 0)
        if lib is not None and lib.state is LibraryPhase.MATERIALIZING:
            return None
        if not self.holds_recipe(recipe_id):
            raise CacheDivergence(f"worker {self.worker_id}: recipe {recipe_id[:12]} objects missing")
        self._library_seq += 1
        self.state.libraries[recipe_id] = LibraryState(
            f"lib-{self.worker_id}-{self._library_seq}",
            recipe_id,
            LibraryPhase.MATERIALIZING,
            materialize_start=now,
        )
        self.context_materializations += 1
        return None

    def finish_library(self, recipe_id: str, now: int) -> LibraryReady:
        self._check_alive()
        lib = self.state.libraries[recipe_id]
        if lib.state is not LibraryPhase.MATERIALIZING:
            raise RuntimeError(f"library {lib.library_id} is {lib.state.value}")
        self.state.libraries[recipe_id] = replace(lib, state=LibraryPhase.READY, materialize_end=now)
        return LibraryReady(recipe_id, now - lib.materialize_start)

    def kill_library(self, recipe_id: str) -> None:
        lib = self.state.libraries.get(recipe_id)
        if lib is not None:
            self.state.libraries[recipe_id] = replace(lib, state=LibraryPhase.DEAD)

    def library(self, recipe_id: str) -> LibraryState | None:
        return self.state.libraries.get(recipe_id)

    # ------------------------------------------------------------ invocations

    def begin_invocation(self, task: TaskSpec, now: int = 0, hosted: bool = True) -> str:
        """Create the task sandbox and claim the single execution slot.

        ``hosted`` invocations run inside a Ready library; otherwise the task
        loads its own context (one materialization per task).
        """
        self._check_alive()
        st = self.state
        if st.current_invocation is not None:
            raise RuntimeError(f"worker {self.worker_id} already runs task {st.current_invocation[0]}")
        if hosted:
            lib = st.libraries.get(task.recipe_id)
            if lib is None or lib.state is not LibraryPhase.READY:
                raise RuntimeError(f"no Ready library for {task.recipe_id[:12]}")
        else:
            self.context_materializations += 1
        sandbox = f"{task.task_id}.{task.attempt}"
        if self.cache_dir is not None:
            (self.cache_dir / "sandbox" / sandbox).mkdir(parents=True, exist_ok=True)
        self.sandboxes_created += 1
        st.current_invocation = (task.task_id, task.attempt, sandbox)
        return sandbox

    def sandbox_path(self, sandbox: str) -> Path | None:
        return None if self.cache_dir is None else self.cache_dir / "sandbox" / sandbox

    def finish_invocation(
        self,
        task: TaskSpec,
        outputs: tuple | None,
        timing: Timing,
        hosted: bool = True,
        failure: str = "",
    ) -> InvocationResult:
        """Hand off the output, remove the sandbox and free the slot."""
        self._check_alive()
        st = self.state
        cur = st.current_invocation
        if cur is None or cur[:2] != (task.task_id, task.attempt):
            raise RuntimeError(f"task {task.task_id}.{task.attempt} is not running here")
        if hosted and not failure:
            lib = st.libraries.get(task.recipe_id)
            if lib is None or lib.state is not LibraryPhase.READY:
                failure = "library died mid-invocation"
            else:
                st.libraries[task.recipe_id] = replace(lib, invocations_served=lib.invocations_served + 1)
        path = self.sandbox_path(cur[2])
        if path is not None:
            shutil.rmtree(path, ignore_errors=True)
        self.sandboxes_removed += 1
        st.current_invocation = None
        if failure:
            return InvocationResult(task.task_id, task.attempt, Outcome.FAILED, None, timing, self.worker_id, failure)
        return InvocationResult(task.task_id, task.attempt, Outcome.COMPLETED, tuple(outputs), timing, self.worker_id)

    # ------------------------------------------------------------ peer service

    def open_outbound(self, object_id: str) -> FetchDenied | None:
        entry = self.state.cache.get(object_id)
        if not self.alive or entry is None or entry.state is not CacheState.PRESENT:
            return FetchDenied("absent")
        if self.state.active_outbound_transfers >= self.transfer_cap:
            return FetchDenied("at-cap")
        self.state.active_outbound_transfers += 1
        return None

    def close_outbound(self) -> None:
        if self.state.active_outbound_transfers > 0:
            self.state.active_outbound_transfers -= 1

    def serve_peer_transfer(self, object_id: str, chunk_size: int = CHUNK_SIZE) -> FetchDenied | OutboundStream:
        """Answer a Fetch: a chunk stream, or FetchDenied("absent" / "at-cap").

        The outbound slot is held until the stream is exhausted or closed,
        so an abandoned stream (lost connection) releases it too.
        """
        denied = self.open_outbound(object_id)
        if denied is not None:
            return denied
        data = self.read_object(object_id) if (object_id in self._blobs or self.cache_dir) else b""
        return OutboundStream(object_id, data, chunk_size, self.close_outbound)

    # ------------------------------------------------------------ eviction

    def evict(self) -> None:
        """Halt instantly. Nothing is flushed or reported."""
        self.alive = False
        self.state.current_invocation = None
        self.state.active_outbound_transfers = 0
