import asyncio
import hashlib
import random
import struct

import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from pervasive.domain import GpuModel, InvocationResult, ObjectKind, Outcome, Resources, Timing, WorkerProfile
from pervasive.protocol import (
    CHUNK_SIZE,
    CacheAck,
    Chunk,
    Fetch,
    FetchDenied,
    FrameDecoder,
    Invoke,
    Joined,
    LibraryReady,
    ManifestItem,
    MaterializeContext,
    NeedMore,
    ProtocolError,
    Result,
    RetireWorker,
    StageIn,
    StageInFailed,
    TransferDone,
    chunk_stream,
    decode_frame,
    encode_frame,
    read_message,
)

OID = hashlib.sha256(b"hello").hexdigest()

oids = st.binary(min_size=32, max_size=32).map(bytes.hex)
texts = st.text(max_size=40)
u32 = st.integers(0, 2**32 - 1)
u64 = st.integers(0, 2**64 - 1)
i64 = st.integers(-(2**63), 2**63 - 1)
blobs = st.binary(max_size=64)

manifest_items = st.builds(ManifestItem, oids, st.sampled_from(list(ObjectKind)), u64, texts, texts)
profiles = st.builds(
    WorkerProfile,
    u64,
    st.builds(GpuModel, texts, st.floats(min_value=1e-6, max_value=1e6), st.integers(0, 65535)),
    st.builds(Resources, u32, u32, u32, st.just(1)),
    u64,
    i64,
)


@st.composite
def results(draw):
    outcome = draw(st.sampled_from(list(Outcome)))
    outputs = tuple(draw(st.lists(blobs, max_size=5))) if outcome is Outcome.COMPLETED else None
    timing = Timing(*draw(st.lists(i64, min_size=5, max_size=5)))
    return InvocationResult(draw(u64), draw(u32), outcome, outputs, timing, draw(u64), draw(texts))


messages = st.one_of(
    st.builds(StageIn, oids, st.lists(manifest_items, max_size=4).map(tuple)),
    st.builds(MaterializeContext, oids),
    st.builds(Invoke, u64, u32, oids, st.lists(blobs, max_size=5).map(tuple)),
    st.just(RetireWorker()),
    st.builds(Joined, profiles, texts),
    st.builds(CacheAck, oids),
    st.builds(LibraryReady, oids, u64),
    st.builds(Result, results()),
    st.builds(TransferDone, oids, texts),
    st.builds(StageInFailed, oids, texts),
    st.builds(Fetch, oids),
    st.builds(Chunk, oids, u64, blobs),
    st.builds(FetchDenied, texts),
)


@settings(max_examples=1000, suppress_health_check=[HealthCheck.too_slow], deadline=None)
@given(messages)
def test_roundtrip(msg):
    frame = encode_frame(msg)
    back, n = decode_frame(frame)
    assert n == len(frame)
    assert back == msg
    (length,) = struct.unpack(">I", frame[:4])
    assert length == len(frame) - 4


def test_retire_worker_is_five_bytes():
    assert encode_frame(RetireWorker()).hex() == "0000000104"


def test_fetch_frame_size():
    assert len(encode_frame(Fetch(OID))) == 4 + 1 + 32


@pytest.mark.parametrize(
    "msg, hexstr",
    [
        (FetchDenied("at-cap"), "000000092200066174" "2d636170"),
        (LibraryReady(OID, 15), "0000002912" + OID + "000000000000000f"),
        (Chunk(OID, 0, b"hi"), "0000002f21" + OID + "0000000000000000" + "00000002" + "6869"),
    ],
)
def test_documented_hex_examples(msg, hexstr):
    assert encode_frame(msg).hex() == hexstr


def test_three_bytes_need_more():
    frame = encode_frame(Fetch(OID))
    for k in range(4):
        with pytest.raises(NeedMore):
            decode_frame(frame[:k])
    with pytest.raises(NeedMore):
        decode_frame(frame[:-1])


def test_unknown_tag():
    with pytest.raises(ProtocolError) as exc:
        decode_frame(b"\x00\x00\x00\x01\xff")
    assert exc.value.reason == "unknown tag"


def test_empty_frame_and_trailing_bytes():
    with pytest.raises(ProtocolError):
        decode_frame(b"\x00\x00\x00\x00")
    frame = bytearray(encode_frame(CacheAck(OID)))
    frame[3] += 1
    frame += b"x"
    with pytest.raises(ProtocolError):
        decode_frame(bytes(frame))


def test_chunk_boundaries_do_not_matter():
    rng = random.Random(7)
    msgs = [Invoke(i, i % 3, OID, tuple(rng.randbytes(rng.randrange(20)) for _ in range(3))) for i in range(50)]
    msgs += [Chunk(OID, 0, rng.randbytes(3000)), RetireWorker()]
    stream = b"".join(encode_frame(m) for m in msgs)
    for _ in range(20):
        dec = FrameDecoder()
        got = []
        pos = 0
        while pos < len(stream):
            step = rng.choice([1, 2, 3, 5, 17, 400, 4096])
            got += dec.feed(stream[pos : pos + step])
            pos += step
        assert got == msgs
        assert dec.pending == 0


def test_fuzz_100k_random_byte_strings():
    rng = random.Random(2024)
    tags = [0x01, 0x02, 0x03, 0x04, 0x10, 0x11, 0x12, 0x13, 0x14, 0x15, 0x20, 0x21, 0x22, 0xFF]
    counts = {"msg": 0, "more": 0, "err": 0}
    for i in range(100_000):
        if i % 2:
            data = rng.randbytes(rng.randrange(0, 64))
        else:
            body = bytes([rng.choice(tags)]) + rng.randbytes(rng.randrange(0, 80))
            data = struct.pack(">I", len(body)) + body
        try:
            decode_frame(data)
            counts["msg"] += 1
        except NeedMore:
            counts["more"] += 1
        except ProtocolError:
            counts["err"] += 1
    assert sum(counts.values()) == 100_000
    assert counts["more"] and counts["err"]


def test_chunk_stream_splits_at_one_mib():
    data = bytes(CHUNK_SIZE * 2 + 5)
    chunks = list(chunk_stream(OID, data))
    assert [len(c.data) for c in chunks] == [CHUNK_SIZE, CHUNK_SIZE, 5]
    assert [c.offset for c in chunks] == [0, CHUNK_SIZE, 2 * CHUNK_SIZE]
    assert list(chunk_stream(OID, b"")) == [Chunk(OID, 0, b"")]


def test_read_message_from_stream():
    async def go():
        reader = asyncio.StreamReader()
        reader.feed_data(encode_frame(CacheAck(OID)) + encode_frame(RetireWorker()))
        reader.feed_eof()
        return [await read_message(reader), await read_message(reader), await read_message(reader)]

    assert asyncio.run(go()) == [CacheAck(OID), RetireWorker(), None]
