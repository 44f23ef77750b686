"""Message catalog and length-prefixed binary framing.

Frame layout (all integers big-endian)::

    length: u32   number of bytes that follow (tag + payload)
    tag:    u8    message type
    payload       message fields in declaration order

Field encodings: ``u8/u16/u32/u64`` fixed width, ``i64`` signed, ``f64``
IEEE-754 double, ``oid`` 32 raw bytes (a SHA-256 object id, hex in Python),
``str`` u16 length + UTF-8, ``bytes`` u32 length + raw, lists u32 count +
items. See PROTOCOL.md for hex examples.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields
from typing import Any, ClassVar

from .domain import (
    GpuModel,
    InvocationResult,
    ObjectKind,
    Outcome,
    Resources,
    Timing,
    WorkerProfile,
)

HEADER = struct.Struct(">IB")
MAX_FRAME_LENGTH = 2**32 - 1
CHUNK_SIZE = 1 << 20


class ProtocolError(Exception):
    def __init__(self, offset: int, reason: str) -> None:
        super().__init__(f"protocol error at offset {offset}: {reason}")
        self.offset = offset
        self.reason = reason


class NeedMore(Exception):
    """The buffer holds only part of a frame; ``n`` more bytes are required."""

    def __init__(self, n: int) -> None:
        super().__init__(f"need {n} more bytes")
        self.n = n


class EncodingError(ValueError):
    pass


# ------------------------------------------------------------------ payloads


@dataclass(frozen=True)
class ManifestItem:
    object_id: str
    kind: ObjectKind
    size: int
    source: str = ""  # "" = manager, otherwise a peer "host:port"
    name: str = ""


class _Writer:
    def __init__(self) -> None:
        self.buf = bytearray()

    def u8(self, v: int) -> None:
        self.buf += struct.pack(">B", v)

    def u16(self, v: int) -> None:
        self.buf += struct.pack(">H", v)

    def u32(self, v: int) -> None:
        self.buf += struct.pack(">I", v)

    def u64(self, v: int) -> None:
        self.buf += struct.pack(">Q", v)

    def i64(self, v: int) -> None:
        self.buf += struct.pack(">q", v)

    def f64(self, v: float) -> None:
        self.buf += struct.pack(">d", v)

    def oid(self, v: str) -> None:
        raw = bytes.fromhex(v)
        if len(raw) != 32:
            raise EncodingError(f"object id must be 32 bytes, got {len(raw)}")
        self.buf += raw

    def str(self, v: str) -> None:
        raw = v.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise EncodingError("string too long")
        self.u16(len(raw))
        self.buf += raw

    def bytes(self, v: bytes) -> None:
        if len(v) > MAX_FRAME_LENGTH:
            raise EncodingError("blob too long")
        self.u32(len(v))
        self.buf += v

    def bytes_list(self, v: tuple[bytes, ...]) -> None:
        self.u32(len(v))
        for item in v:
            if not isinstance(item, (bytes, bytearray)):
                raise EncodingError("wire lists carry bytes items only")
            self.bytes(bytes(item))

    def manifest(self, v: tuple[ManifestItem, ...]) -> None:
        self.u32(len(v))
        for item in v:
            self.oid(item.object_id)
            self.u8(int(item.kind))
            self.u64(item.size)
            self.str(item.source)
            self.str(item.name)

    def profile(self, p: WorkerProfile) -> None:
        self.u64(p.worker_id)
        self.str(p.gpu.model_name)
        self.f64(p.gpu.speed_factor)
        self.u16(p.gpu.release_year)
        r = p.resources
        for v in (r.cores, r.memory, r.disk, r.gpus):
            self.u32(v)
        self.u64(p.cache_capacity)
        self.i64(p.join_time)

    def result(self, r: InvocationResult) -> None:
        self.u64(r.task_id)
        self.u32(r.attempt)
        self.u8(_OUTCOME_CODES[r.outcome])
        if r.outputs is None:
            self.u8(0)
        else:
            self.u8(1)
            self.bytes_list(r.outputs)
        t = r.timing
        for v in (t.queued_at, t.dispatched_at, t.context_ready_at, t.started_at, t.finished_at):
            self.i64(v)
        self.u64(r.executed_on)
        self.str(r.reason)


_OUTCOME_CODES = {Outcome.COMPLETED: 0, Outcome.EVICTED: 1, Outcome.FAILED: 2}
_OUTCOMES = {v: k for k, v in _OUTCOME_CODES.items()}


class _Reader:
    def __init__(self, data: memoryview, base: int) -> None:
        self.data = data
        self.pos = 0
        self.base = base

    def _take(self, n: int) -> memoryview:
        if self.pos + n > len(self.data):
            raise ProtocolError(self.base + self.pos, "truncated payload")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def _unpack(self, fmt: str, n: int) -> Any:
        return struct.unpack(fmt, self._take(n))[0]

    def u8(self) -> int:
        return self._unpack(">B", 1)

    def u16(self) -> int:
        return self._unpack(">H", 2)

    def u32(self) -> int:
        return self._unpack(">I", 4)

    def u64(self) -> int:
        return self._unpack(">Q", 8)

    def i64(self) -> int:
        return self._unpack(">q", 8)

    def f64(self) -> float:
        return self._unpack(">d", 8)

    def oid(self) -> str:
        return bytes(self._take(32)).hex()

    def str(self) -> str:
        at = self.base + self.pos
        raw = bytes(self._take(self.u16()))
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError:
            raise ProtocolError(at, "invalid utf-8 string") from None

    def bytes(self) -> bytes:
        return bytes(self._take(self.u32()))

    def _count(self, min_item_size: int) -> int:
        at = self.base + self.pos
        n = self.u32()
        if n * min_item_size > len(self.data) - self.pos:
            raise ProtocolError(at, "list count exceeds payload")
        return n

    def bytes_list(self) -> tuple[bytes, ...]:
        return tuple(self.bytes() for _ in range(self._count(4)))

    def kind(self) -> ObjectKind:
        at = self.base + self.pos
        code = self.u8()
        try:
            return ObjectKind(code)
        except ValueError:
            raise ProtocolError(at, f"unknown object kind {code}") from None

    def manifest(self) -> tuple[ManifestItem, ...]:
        return tuple(
            ManifestItem(self.oid(), self.kind(), self.u64(), self.str(), self.str())
            for _ in range(self._count(32 + 1 + 8 + 2 + 2))
        )

    def profile(self) -> WorkerProfile:
        at = self.base + self.pos
        worker_id = self.u64()
        name = self.str()
        speed = self.f64()
        year = self.u16()
        res = Resources(self.u32(), self.u32(), self.u32(), self.u32())
        capacity = self.u64()
        join = self.i64()
        try:
            return WorkerProfile(worker_id, GpuModel(name, speed, year), res, capacity, join)
        except ValueError as exc:
            raise ProtocolError(at, f"invalid profile: {exc}") from None

    def result(self) -> InvocationResult:
        at = self.base + self.pos
        task_id = self.u64()
        attempt = self.u32()
        code = self.u8()
        if code not in _OUTCOMES:
            raise ProtocolError(at, f"unknown outcome {code}")
        flag = self.u8()
        if flag > 1:
            raise ProtocolError(at, "bad outputs flag")
        outputs = self.bytes_list() if flag else None
        timing = Timing(self.i64(), self.i64(), self.i64(), self.i64(), self.i64())
        executed_on = self.u64()
        reason = self.str()
        try:
            return InvocationResult(task_id, attempt, _OUTCOMES[code], outputs, timing, executed_on, reason)
        except ValueError as exc:
            raise ProtocolError(at, f"invalid result: {exc}") from None


# ------------------------------------------------------------------ messages


class Message:
    TAG: ClassVar[int]
    WIRE: ClassVar[tuple[str, ...]]


_REGISTRY: dict[int, type[Message]] = {}


def _message(tag: int, *wire: str):
    def wrap(cls):
        cls = dataclass(frozen=True)(cls)
        cls.TAG = tag
        cls.WIRE = wire
        if tag in _REGISTRY:
            raise RuntimeError(f"duplicate tag {tag:#x}")
        _REGISTRY[tag] = cls
        return cls

    return wrap


# manager -> worker


@_message(0x01, "oid", "manifest")
class StageIn(Message):
    recipe_id: str
    objects: tuple[ManifestItem, ...]


@_message(0x02, "oid")
class MaterializeContext(Message):
    recipe_id: str


@_message(0x03, "u64", "u32", "oid", "bytes_list")
class Invoke(Message):
    task_id: int
    attempt: int
    recipe_id: str
    batch: tuple[bytes, ...]


@_message(0x04)
class RetireWorker(Message):
    pass


# worker -> manager


@_message(0x10, "profile", "str")
class Joined(Message):
    profile: WorkerProfile
    address: str = ""


@_message(0x11, "oid")
class CacheAck(Message):
    object_id: str


@_message(0x12, "oid", "u64")
class LibraryReady(Message):
    recipe_id: str
    materialize_ms: int


@_message(0x13, "result")
class Result(Message):
    result: InvocationResult


@_message(0x14, "oid", "str")
class TransferDone(Message):
    object_id: str
    peer: str


@_message(0x15, "oid", "str")
class StageInFailed(Message):
    object_id: str
    reason: str


# worker <-> worker (the manager also answers Fetch as the root source)


@_message(0x20, "oid")
class Fetch(Message):
    object_id: str


@_message(0x21, "oid", "u64", "bytes")
class Chunk(Message):
    object_id: str
    offset: int
    data: bytes


@_message(0x22, "str")
class FetchDenied(Message):
    reason: str


MESSAGE_TYPES: dict[int, type[Message]] = dict(_REGISTRY)


def encode_frame(msg: Message) -> bytes:
    w = _Writer()
    try:
        for f, kind in zip(fields(msg), msg.WIRE):
            getattr(w, kind)(getattr(msg, f.name))
    except (struct.error, ValueError, TypeError) as exc:
        raise EncodingError(f"{type(msg).__name__}: {exc}") from None
    length = 1 + len(w.buf)
    if length > MAX_FRAME_LENGTH:
        raise EncodingError("payload exceeds 2^32-1 bytes")
    return HEADER.pack(length, msg.TAG) + bytes(w.buf)


def decode_frame(buf: bytes | bytearray | memoryview, offset: int = 0) -> tuple[Message, int]:
    """Decode one frame starting at ``offset``.

    Returns ``(message, bytes_consumed)``. Raises :class:`NeedMore` on a partial
    frame and :class:`ProtocolError` on an unknown tag or malformed payload.
    """
    view = memoryview(buf)[offset:]
    if len(view) < 4:
        raise NeedMore(5 - len(view))
    (length,) = struct.unpack_from(">I", view, 0)
    if length == 0:
        raise ProtocolError(offset, "empty frame")
    total = 4 + length
    if len(view) < total:
        raise NeedMore(total - len(view))
    tag = view[4]
    cls = MESSAGE_TYPES.get(tag)
    if cls is None:
        raise ProtocolError(offset + 4, "unknown tag")
    r = _Reader(view[5:total], offset + 5)
    values = [getattr(r, kind)() for kind in cls.WIRE]
    if r.pos != len(r.data):
        raise ProtocolError(offset + 5 + r.pos, "trailing bytes in payload")
    return cls(*values), total


class FrameDecoder:
    """Incremental decoder; feed arbitrary chunks, get whole messages back."""

    def __init__(self) -> None:
        self._buf = bytearray()
        self._consumed = 0

    def feed(self, data: bytes) -> list[Message]:
        self._buf += data
        out = []
        pos = 0
        while True:
            try:
                msg, n = decode_frame(self._buf, pos)
            except NeedMore:
                break
            except ProtocolError as exc:
                raise ProtocolError(self._consumed + exc.offset, exc.reason) from None
            out.append(msg)
            pos += n
        del self._buf[:pos]
        self._consumed += pos
        return out

    @property
    def pending(self) -> int:
        return len(self._buf)


async def read_message(reader) -> Message | None:
    """Read one frame from an ``asyncio.StreamReader``; ``None`` on clean EOF."""
    import asyncio

    try:
        head = await reader.readexactly(4)
    except asyncio.IncompleteReadError as exc:
        if exc.partial:
            raise ProtocolError(0, "connection closed mid-header") from None
        return None
    (length,) = struct.unpack(">I", head)
    try:
        body = await reader.readexactly(length)
    except asyncio.IncompleteReadError:
        raise ProtocolError(4, "connection closed mid-frame") from None
    msg, _ = decode_frame(head + body)
    return msg


def chunk_stream(object_id: str, data: bytes, chunk_size: int = CHUNK_SIZE):
    """Split a blob into Chunk messages. An empty blob yields one empty chunk."""
    if not data:
        yield Chunk(object_id, 0, b"")
        return
    for off in range(0, len(data), chunk_size):
        yield Chunk(object_id, off, data[off : off + chunk_size])
