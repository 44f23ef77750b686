"""Worker process for live mode.

Connects to the manager, serves cached objects to peers, hosts the library
in-process and runs invocations in per-task sandbox directories.

    python -m pervasive.harness.live_worker --manager 127.0.0.1:PORT --worker-id 0 --cache-dir DIR
"""

from __future__ import annotations

import argparse
import asyncio
import hashlib
import sys
import time
from dataclasses import dataclass, field

from ..domain import GpuModel, TaskSpec, Timing, WorkerProfile, WorkloadModel
from ..sim.calibration import load_constants
from ..protocol import (
    Chunk,
    Fetch,
    FetchDenied,
    Invoke,
    Joined,
    LibraryReady,
    MaterializeContext,
    ProtocolError,
    Result,
    RetireWorker,
    StageIn,
    StageInFailed,
    TransferDone,
    encode_frame,
    read_message,
)
from ..protocol import ManifestItem
from ..worker import StageInFailed as StageError
from ..worker import WorkerRuntime


def _ms() -> int:
    return int(time.monotonic() * 1000)


def split_address(addr: str) -> tuple[str, int]:
    host, port = addr.rsplit(":", 1)
    return host, int(port)


async def fetch_object(source: str, item: ManifestItem) -> bytes:
    host, port = split_address(source)
    reader, writer = await asyncio.open_connection(host, port)
    try:
        writer.write(encode_frame(Fetch(item.object_id)))
        await writer.drain()
        buf = bytearray()
        while True:
            msg = await read_message(reader)
            if msg is None:
                raise StageError(item.object_id, "source closed the connection")
            if isinstance(msg, FetchDenied):
                raise StageError(item.object_id, msg.reason)
            if not isinstance(msg, Chunk) or msg.offset != len(buf):
                raise StageError(item.object_id, "unexpected chunk")
            buf += msg.data
            if len(buf) >= item.size:
                break
    finally:
        writer.close()
    data = bytes(buf)
    if hashlib.sha256(data).hexdigest() != item.object_id:
        raise StageError(item.object_id, "digest mismatch")
    return data


async def serve_fetches(reader, writer, lookup) -> None:
    """Answer Fetch requests with chunk streams; ``lookup`` returns a stream or FetchDenied."""
    try:
        while (msg := await read_message(reader)) is not None:
            if not isinstance(msg, Fetch):
                break
            out = lookup(msg.object_id)
            if isinstance(out, FetchDenied):
                writer.write(encode_frame(out))
                await writer.drain()
                continue
            try:
                for chunk in out:
                    writer.write(encode_frame(chunk))
                    await writer.drain()
            finally:
                out.close()
    except (ConnectionError, ProtocolError, asyncio.IncompleteReadError):
        pass
    finally:
        writer.close()


@dataclass
class Library:
    recipe_id: str
    context: object
    infer: object


@dataclass
class LiveWorker:
    runtime: WorkerRuntime
    workload: WorkloadModel
    manifests: dict[str, tuple[ManifestItem, ...]] = field(default_factory=dict)
    libraries: dict[str, Library] = field(default_factory=dict)

    def _named(self, recipe_id: str, name: str) -> bytes:
        for item in self.manifests[recipe_id]:
            if item.name == name:
                return self.runtime.read_object(item.object_id)
        raise KeyError(name)

    async def _load(self, recipe_id: str) -> Library:
        ns: dict = {}
        exec(self._named(recipe_id, "context_code").decode(), ns)
        exec(self._named(recipe_id, "function_code").decode(), ns)
        context = ns["load_model"](self._named(recipe_id, "model"))
        await asyncio.sleep(self.workload.t_model_load)
        return Library(recipe_id, context, ns["infer_model"])

    async def stage(self, msg: StageIn, send) -> None:
        rt = self.runtime
        self.manifests[msg.recipe_id] = msg.objects
        try:
            todo, acks = rt.stage_in(msg.objects, _ms(), msg.recipe_id)
            for ack in acks:
                send(ack)
            source = ""
            for item in todo:
                source = item.source
                data = await fetch_object(item.source, item)
                send(rt.complete_object(item.object_id, _ms(), data))
            send(TransferDone(msg.recipe_id, source))
        except (StageError, OSError) as exc:
            oid = getattr(exc, "object_id", msg.recipe_id)
            send(StageInFailed(oid, getattr(exc, "reason", str(exc))))

    async def materialize(self, recipe_id: str) -> LibraryReady:
        rt = self.runtime
        ready = rt.ensure_library(recipe_id, _ms())
        if ready is not None:
            return ready
        self.libraries[recipe_id] = await self._load(recipe_id)
        return rt.finish_library(recipe_id, _ms())

    async def invoke(self, msg: Invoke, hosted: bool) -> Result:
        rt = self.runtime
        spec = TaskSpec(msg.task_id, msg.recipe_id, msg.batch, attempt=msg.attempt)
        t0 = _ms()
        sandbox = rt.begin_invocation(spec, t0, hosted=hosted)
        lib = self.libraries[msg.recipe_id] if hosted else await self._load(msg.recipe_id)
        t1 = _ms()
        outputs = tuple(lib.infer(lib.context, list(msg.batch)))
        w = self.workload
        overhead = w.warm_dispatch_overhead if hosted else 0.0
        await asyncio.sleep(overhead + len(msg.batch) * w.t_inf_ref / rt.state.profile.gpu.speed_factor)
        out_file = rt.sandbox_path(sandbox) / "outputs.bin"
        out_file.write_bytes(b"".join(outputs))
        result = rt.finish_invocation(spec, outputs, Timing(t0, t0, t1, t1, _ms()), hosted=hosted)
        return Result(result)


async def run_worker(args) -> int:
    profile = WorkerProfile(args.worker_id, GpuModel(args.gpu, args.speed))
    workload = load_constants().workload.scaled(args.scale)
    rt = WorkerRuntime(profile, args.transfer_cap, args.cache_dir)
    worker = LiveWorker(rt, workload)

    peer = await asyncio.start_server(
        lambda r, w: serve_fetches(r, w, rt.serve_peer_transfer), "127.0.0.1", 0
    )
    peer_addr = "127.0.0.1:%d" % peer.sockets[0].getsockname()[1]
    reader, writer = await asyncio.open_connection(*split_address(args.manager))

    def send(msg) -> None:
        writer.write(encode_frame(msg))

    send(Joined(profile, peer_addr))
    await writer.drain()
    hosted = args.mode == "pervasive"
    try:
        while (msg := await read_message(reader)) is not None:
            if isinstance(msg, StageIn):
                await worker.stage(msg, send)
            elif isinstance(msg, MaterializeContext):
                send(await worker.materialize(msg.recipe_id))
            elif isinstance(msg, Invoke):
                send(await worker.invoke(msg, hosted))
            elif isinstance(msg, RetireWorker):
                break
            await writer.drain()
    except (ConnectionError, ProtocolError):
        return 1
    finally:
        writer.close()
        peer.close()
    return 0


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="pervasive-worker")
    p.add_argument("--manager", required=True, help="host:port of the manager")
    p.add_argument("--worker-id", type=int, required=True)
    p.add_argument("--cache-dir", required=True)
    p.add_argument("--gpu", default="NVIDIA A10")
    p.add_argument("--speed", type=float, default=1.0)
    p.add_argument("--transfer-cap", type=int, default=3)
    p.add_argument("--mode", choices=("partial", "pervasive"), default="pervasive")
    p.add_argument("--scale", type=float, default=1000.0, help="divide workload times by this factor")
    args = p.parse_args(argv)
    return asyncio.run(run_worker(args))


if __name__ == "__main__":
    sys.exit(main())
