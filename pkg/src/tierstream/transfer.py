"""Data movement: device->host staging and multi-worker host->file flushing.

``SimTransferEngine`` runs on a discrete-event clock with integer nanoseconds.
Every duration is charged on logical bytes (physical bytes times
``byte_scale``), while the physical bytes really move: chunks are copied into
the staging cache and written to checkpoint files with positional writes.

Per rank there is one device copy engine (copies complete in issue order), one
host copy path, a pool of flush workers sharing one queue, and a background
serializer. A dispatcher per checkpoint pulls chunks from the rank's provider
stream, acquires staging space (back-pressure) and routes each chunk.
"""

from __future__ import annotations

import csv
import enum
import io
import queue
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import simpy

from .cache import CacheError, CacheTimeout, Region, StagingCache
from .fileformat import CheckpointFile, file_path, open_for_write
from .model import RankState, StateObject, Tier
from .providers import (
    END, ChunkDescriptor, ChunkTrace, CompositeProvider, LayoutPlan, PlacementMode,
    ProviderKind, SerializingProvider, StreamError, build_provider, plan_layout,
)

NS_PER_S = 1_000_000_000


def transfer_ns(logical_bytes: int, bandwidth: float) -> int:
    """Time to move ``logical_bytes`` at ``bandwidth`` B/s, rounded up to 1 ns."""
    if logical_bytes <= 0:
        return 0
    bw = int(bandwidth)
    if bw <= 0:
        raise ValueError("bandwidth must be positive")
    return -(-logical_bytes * NS_PER_S // bw)


def seconds_to_ns(seconds: float) -> int:
    return int(round(seconds * NS_PER_S))


@dataclass
class TransferConfig:
    d2h_bandwidth: int = 16_000_000_000
    host_copy_bandwidth: int = 32_000_000_000
    flush_bandwidth: int = 1_000_000_000  # per worker
    flush_workers: int = 4
    serialize_bandwidth: int = 200_000_000
    byte_scale: int = 1
    raw_chunk_bytes: int = 16_000_000  # logical
    serialized_chunk_bytes: int = 1_000_000  # logical
    alignment: int = 4096
    host_inplace: bool = False
    cache_timeout_ns: int | None = None
    overwrite: bool = True
    durable: bool = False

    def __post_init__(self):
        if self.flush_workers < 1:
            raise ValueError("flush_workers must be >= 1")
        for name in ("d2h_bandwidth", "host_copy_bandwidth", "flush_bandwidth", "serialize_bandwidth"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def physical_raw_chunk(self) -> int:
        return max(1, self.raw_chunk_bytes // self.byte_scale)

    @property
    def physical_serialized_chunk(self) -> int:
        return max(1, self.serialized_chunk_bytes // self.byte_scale)


class ObjectStatus(enum.IntEnum):
    PENDING = 0
    STAGED = 1
    PERSISTED = 2


class Op(str, enum.Enum):
    STAGE = "STAGE"
    FLUSH = "FLUSH"
    SERIALIZE = "SERIALIZE"
    BARRIER = "BARRIER"


@dataclass(frozen=True)
class TimelineEvent:
    checkpoint_id: int
    rank_id: int
    object_id: int
    op: Op
    t_start: int
    t_end: int
    bytes: int


TIMELINE_COLUMNS = ("checkpoint_id", "rank_id", "object_id", "op", "t_start", "t_end", "bytes")


class Timeline:
    """Append-only event log; times are nanoseconds on the engine clock."""

    def __init__(self):
        self.events: list[TimelineEvent] = []

    def add(self, *args) -> None:
        self.events.append(TimelineEvent(*args))

    def select(self, op: Op | None = None, checkpoint_id: int | None = None,
               rank_id: int | None = None) -> list[TimelineEvent]:
        return [e for e in self.events
                if (op is None or e.op is op)
                and (checkpoint_id is None or e.checkpoint_id == checkpoint_id)
                and (rank_id is None or e.rank_id == rank_id)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(TIMELINE_COLUMNS)
        for e in self.events:
            writer.writerow([e.checkpoint_id, e.rank_id, e.object_id, e.op.value,
                             e.t_start, e.t_end, e.bytes])
        return buf.getvalue()


class TierError(ValueError):
    pass


class TransferTicket:
    """Per-checkpoint, per-rank completion tracking.

    Status only moves forward. Snapshot-complete means every object is at
    least STAGED; persisted means every object is PERSISTED and every file
    carries its footer. Errors wake all waiters.
    """

    def __init__(self, checkpoint_id: int, rank_id: int, objects: list[StateObject],
                 raw_chunk: int, files: list[str]):
        self.checkpoint_id = checkpoint_id
        self.rank_id = rank_id
        self.status = {o.object_id: ObjectStatus.PENDING for o in objects}
        self.expected: dict[int, int | None] = {}
        for o in objects:
            self.expected[o.object_id] = -(-o.size_bytes // raw_chunk) if o.is_raw else None
        self._staged = {o.object_id: 0 for o in objects}
        self._persisted = {o.object_id: 0 for o in objects}
        self._unstaged = len(objects)
        self._unpersisted = len(objects)
        self.files_pending = set(files)
        self.error: BaseException | None = None
        self._lock = threading.RLock()
        self._on_snapshot: list[Callable[[], None]] = []
        self._on_persisted: list[Callable[[], None]] = []
        self.snapshot_done = threading.Event()
        self.persisted_done = threading.Event()
        self._fire_if_done()

    @property
    def snapshot_complete(self) -> bool:
        return self._unstaged == 0

    @property
    def persisted(self) -> bool:
        return self._unpersisted == 0 and not self.files_pending

    @property
    def failed(self) -> bool:
        return self.error is not None

    def _advance(self, oid: int, status: ObjectStatus) -> None:
        current = self.status[oid]
        if status <= current:
            return
        if current < ObjectStatus.STAGED <= status:
            self._unstaged -= 1
        if status == ObjectStatus.PERSISTED:
            self._unpersisted -= 1
        self.status[oid] = status

    def set_expected(self, oid: int, n_chunks: int) -> None:
        with self._lock:
            self.expected[oid] = n_chunks
            self._check_persisted(oid)

    def chunk_staged(self, oid: int) -> None:
        with self._lock:
            self._staged[oid] += 1
            if self.expected[oid] is not None and self._staged[oid] >= self.expected[oid]:
                self._advance(oid, ObjectStatus.STAGED)
        self._fire_if_done()

    def mark_staged(self, oid: int) -> None:
        with self._lock:
            self._advance(oid, ObjectStatus.STAGED)
            self._check_persisted(oid)
        self._fire_if_done()

    def chunk_persisted(self, oid: int) -> None:
        with self._lock:
            self._persisted[oid] += 1
            self._check_persisted(oid)
        self._fire_if_done()

    def _check_persisted(self, oid: int) -> None:
        n = self.expected[oid]
        if n is not None and self._persisted[oid] >= n and self.status[oid] >= ObjectStatus.STAGED:
            self._advance(oid, ObjectStatus.PERSISTED)

    def file_finalized(self, file_id: str) -> None:
        with self._lock:
            self.files_pending.discard(file_id)
        self._fire_if_done()

    def fail(self, error: BaseException) -> None:
        with self._lock:
            if self.error is None:
                self.error = error
        self._fire(force=True)

    def on_snapshot(self, callback: Callable[[], None]) -> None:
        with self._lock:
            if not (self.snapshot_complete or self.failed):
                self._on_snapshot.append(callback)
                return
        callback()

    def on_persisted(self, callback: Callable[[], None]) -> None:
        with self._lock:
            if not (self.persisted or self.failed):
                self._on_persisted.append(callback)
                return
        callback()

    def _fire_if_done(self) -> None:
        self._fire(force=False)

    def _fire(self, force: bool) -> None:
        with self._lock:
            run = []
            if force or self.snapshot_complete:
                run += self._on_snapshot
                self._on_snapshot = []
                self.snapshot_done.set()
            if force or self.persisted:
                run += self._on_persisted
                self._on_persisted = []
                self.persisted_done.set()
        for cb in run:
            cb()

    def raise_if_failed(self) -> None:
        if self.error is not None:
            raise self.error


@dataclass(eq=False)
class CheckpointJob:
    checkpoint_id: int
    iteration: int
    rank: RankState
    ckpt_dir: Path
    plan: LayoutPlan
    files: dict[str, CheckpointFile]
    provider: CompositeProvider
    ticket: TransferTicket
    trace: ChunkTrace = field(default_factory=ChunkTrace)
    dispatched: dict[str, int] = field(default_factory=dict)
    written: dict[str, int] = field(default_factory=dict)
    dispatch_done: bool = False
    serialized_done: bool = False
    issued_at: int = 0
    snapshot_at: int | None = None
    persisted_at: int | None = None

    @property
    def serializing_leaves(self) -> list[SerializingProvider]:
        return [p for p in self.provider.leaves() if p.kind is ProviderKind.SERIALIZING]

    @property
    def failed(self) -> bool:
        return self.ticket.failed

    def fail(self, error: BaseException) -> None:
        if self.ticket.failed:
            return
        for f in self.files.values():
            f.abort()
        self.ticket.fail(error)

    def logical_bytes(self, byte_scale: int) -> int:
        """Checkpoint size: raw bytes plus serialized bytes, in logical units."""
        total = 0
        for obj in self.rank.objects:
            if obj.size_bytes:
                total += obj.size_bytes
        return total * byte_scale


@dataclass(eq=False)
class _Item:
    job: CheckpointJob
    chunk: ChunkDescriptor
    region: Region | None

    @property
    def data(self):
        return self.region.view if self.region is not None else self.chunk.data_ref


def prepare_job(rank: RankState, checkpoint_id: int, iteration: int, ckpt_dir, config: TransferConfig,
                policy=None) -> CheckpointJob:
    """Plan the layout, open every file and build the rank's chunk stream."""
    ckpt_dir = Path(ckpt_dir)
    plan = plan_layout(rank.objects, config.alignment)
    files = {}
    for fid, fplan in plan.files.items():
        files[fid] = open_for_write(file_path(ckpt_dir, rank.rank_id, fid), fplan,
                                    overwrite=config.overwrite, durable=config.durable)
    kwargs = {} if policy is None else {"policy": policy}
    provider = build_provider(rank.objects, plan, config.physical_raw_chunk,
                              config.physical_serialized_chunk, **kwargs)
    ticket = TransferTicket(checkpoint_id, rank.rank_id, rank.objects, config.physical_raw_chunk,
                            list(files))
    return CheckpointJob(checkpoint_id, iteration, rank, ckpt_dir, plan, files, provider, ticket,
                         dispatched={f: 0 for f in files}, written={f: 0 for f in files})


class SimTransferEngine:
    def __init__(self, env: simpy.Environment, rank_id: int, cache: StagingCache,
                 config: TransferConfig, timeline: Timeline | None = None,
                 node_flush: simpy.Resource | None = None):
        self.env = env
        self.rank_id = rank_id
        self.cache = cache
        self.config = config
        self.timeline = timeline if timeline is not None else Timeline()
        self.node_flush = node_flush
        self.device_queue = simpy.Store(env)
        self.host_queue = simpy.Store(env)
        self.flush_queue = simpy.Store(env)
        self.serialize_queue = simpy.Store(env)
        self.active_flushes = 0
        self.peak_flushes = 0
        env.process(self._copier(self.device_queue, config.d2h_bandwidth))
        env.process(self._copier(self.host_queue, config.host_copy_bandwidth))
        for _ in range(config.flush_workers):
            env.process(self._flusher())
        env.process(self._serializer())

    # public API -------------------------------------------------------------

    def prepare(self, rank: RankState, checkpoint_id: int, iteration: int, ckpt_dir,
                policy=None) -> CheckpointJob:
        job = prepare_job(rank, checkpoint_id, iteration, ckpt_dir, self.config, policy)
        job.issued_at = self.env.now
        job.ticket.on_snapshot(lambda: setattr(job, "snapshot_at", self.env.now))
        job.ticket.on_persisted(lambda: setattr(job, "persisted_at", self.env.now))
        return job

    def serialize_inline(self, job: CheckpointJob):
        """Generator: serialize every structured object on the caller's time."""
        yield from self._serialize(job)

    def submit(self, job: CheckpointJob, background_serialize: bool) -> None:
        if not job.serialized_done:
            if not background_serialize:
                raise RuntimeError("structured objects must be serialized before submit")
            self.serialize_queue.put(job)
        self.env.process(self._dispatch(job))

    def stage_async(self, job: CheckpointJob, chunk: ChunkDescriptor, region: Region) -> None:
        """Queue a device-resident chunk for a paced copy into ``region``."""
        if chunk.source_tier is not Tier.DEVICE:
            raise TierError(f"stage_async needs a DEVICE chunk, got {chunk.source_tier.name}")
        self.device_queue.put(_Item(job, chunk, region))

    def wait_snapshot(self, ticket: TransferTicket):
        """Generator returning the blocked nanoseconds."""
        t0 = self.env.now
        if not (ticket.snapshot_complete or ticket.failed):
            ev = self.env.event()
            ticket.on_snapshot(lambda: ev.triggered or ev.succeed())
            yield ev
        ticket.raise_if_failed()
        return self.env.now - t0

    def wait_persisted(self, ticket: TransferTicket):
        t0 = self.env.now
        if not (ticket.persisted or ticket.failed):
            ev = self.env.event()
            ticket.on_persisted(lambda: ev.triggered or ev.succeed())
            yield ev
        ticket.raise_if_failed()
        return self.env.now - t0

    # processes --------------------------------------------------------------

    def _logical(self, nbytes: int) -> int:
        return nbytes * self.config.byte_scale

    def _serialize(self, job: CheckpointJob):
        for leaf in job.serializing_leaves:
            while True:
                t0 = self.env.now
                encoded = leaf.encode_next()
                if encoded is None:
                    break
                obj, chunks = encoded
                job.ticket.set_expected(obj.object_id, len(chunks))
                for chunk in chunks:
                    yield self.env.timeout(transfer_ns(self._logical(chunk.length),
                                                       self.config.serialize_bandwidth))
                    leaf.publish(chunk)
                self.timeline.add(job.checkpoint_id, self.rank_id, obj.object_id, Op.SERIALIZE,
                                  t0, self.env.now, self._logical(obj.size_bytes))
                job.ticket.mark_staged(obj.object_id)
            if leaf._error is not None:
                job.fail(leaf._error)
            elif not leaf.finished:
                leaf.finish()
        job.serialized_done = True

    def _serializer(self):
        while True:
            job = yield self.serialize_queue.get()
            if not job.failed:
                yield from self._serialize(job)

    def _acquire(self, size: int):
        ev = self.env.event()
        res = self.cache.request(size, lambda region: ev.succeed(region))
        if isinstance(res, Region):
            return res
        if self.config.cache_timeout_ns is None:
            return (yield ev)
        timer = self.env.timeout(self.config.cache_timeout_ns)
        fired = yield ev | timer
        if ev in fired:
            return fired[ev]
        self.cache.cancel(res)
        raise CacheTimeout(f"rank {self.rank_id}: no staging space for {size} bytes")

    def _dispatch(self, job: CheckpointJob):
        provider = job.provider
        while not job.failed:
            try:
                chunk = provider.poll()
            except StreamError as exc:
                job.fail(exc)
                return
            if chunk is None:
                ev = self.env.event()
                provider.notifier.once(lambda: ev.triggered or ev.succeed())
                yield ev
                continue
            if chunk is END:
                break
            job.trace.record(chunk)
            fid = chunk.placement.file_id
            if chunk.source_tier is Tier.HOST and not chunk.serialized and self.config.host_inplace:
                job.dispatched[fid] += 1
                self.flush_queue.put(_Item(job, chunk, None))
                continue
            try:
                region = yield from self._acquire(chunk.length)
            except CacheError as exc:
                job.fail(exc)
                return
            if job.failed:
                self.cache.release(region)
                return
            job.dispatched[fid] += 1
            item = _Item(job, chunk, region)
            if chunk.serialized:
                # the serializer's output lands directly in staging memory
                region.view[:] = chunk.data_ref
                self.flush_queue.put(item)
            elif chunk.source_tier is Tier.DEVICE:
                self.stage_async(job, chunk, region)
            else:
                self.host_queue.put(item)
        job.dispatch_done = True
        for fid in job.files:
            self._maybe_finalize(job, fid)

    def _copier(self, store: simpy.Store, bandwidth: int):
        while True:
            item = yield store.get()
            job, chunk = item.job, item.chunk
            t0 = self.env.now
            yield self.env.timeout(transfer_ns(self._logical(chunk.length), bandwidth))
            if job.failed:
                self.cache.release(item.region)
                continue
            # bytes are read when the copy lands, as a DMA engine would
            item.region.view[:] = chunk.data_ref
            self.timeline.add(job.checkpoint_id, self.rank_id, chunk.object_id, Op.STAGE,
                              t0, self.env.now, self._logical(chunk.length))
            job.ticket.chunk_staged(chunk.object_id)
            self.flush_queue.put(item)

    def _flusher(self):
        while True:
            item = yield self.flush_queue.get()
            job, chunk = item.job, item.chunk
            if job.failed:
                if item.region is not None:
                    self.cache.release(item.region)
                continue
            fid = chunk.placement.file_id
            handle = job.files[fid]
            if chunk.placement.mode is PlacementMode.APPEND:
                offset = handle.reserve_append(chunk.length)
            else:
                offset = chunk.placement.file_offset
            slot = None
            if self.node_flush is not None:
                slot = self.node_flush.request()
                yield slot
            t0 = self.env.now
            self.active_flushes += 1
            self.peak_flushes = max(self.peak_flushes, self.active_flushes)
            yield self.env.timeout(transfer_ns(self._logical(chunk.length), self.config.flush_bandwidth))
            self.active_flushes -= 1
            if slot is not None:
                self.node_flush.release(slot)
            try:
                if not job.failed:
                    handle.write_region(offset, item.data, chunk.object_id, int(chunk.kind),
                                        chunk.object_offset)
            except OSError as exc:
                job.fail(exc)
            if item.region is not None:
                self.cache.release(item.region)
            if job.failed:
                continue
            self.timeline.add(job.checkpoint_id, self.rank_id, chunk.object_id, Op.FLUSH,
                              t0, self.env.now, self._logical(chunk.length))
            if item.region is None:
                # flushed in place: the file copy is the stable copy
                job.ticket.chunk_staged(chunk.object_id)
            job.ticket.chunk_persisted(chunk.object_id)
            job.written[fid] += 1
            self._maybe_finalize(job, fid)

    def _maybe_finalize(self, job: CheckpointJob, fid: str) -> None:
        handle = job.files[fid]
        if handle.finalized or job.failed or not job.dispatch_done:
            return
        if job.written[fid] < job.dispatched[fid]:
            return
        try:
            handle.finalize()
        except Exception as exc:
            job.fail(exc)
            return
        job.ticket.file_finalized(fid)


class ThreadedTransferEngine:
    """Wall-clock variant: real threads, paced device copies, real file writes.

    Structured objects are serialized inline by ``checkpoint``; this engine
    exists for throughput microbenchmarks rather than for the training loop.
    """

    def __init__(self, rank_id: int, cache: StagingCache, config: TransferConfig,
                 timeline: Timeline | None = None, clock: Callable[[], float] = time.perf_counter):
        self.rank_id = rank_id
        self.cache = cache
        self.config = config
        self.timeline = timeline if timeline is not None else Timeline()
        self.clock = clock
        self._t0 = clock()
        self._copy_q: queue.Queue = queue.Queue()
        self._pool = ThreadPoolExecutor(max_workers=config.flush_workers,
                                        thread_name_prefix=f"flush-r{rank_id}")
        self._lock = threading.Lock()
        self._copier = threading.Thread(target=self._copy_loop, daemon=True)
        self._copier.start()

    def _now_ns(self) -> int:
        return int((self.clock() - self._t0) * NS_PER_S)

    def checkpoint(self, rank: RankState, checkpoint_id: int, iteration: int, ckpt_dir) -> CheckpointJob:
        job = prepare_job(rank, checkpoint_id, iteration, ckpt_dir, self.config)
        for leaf in job.serializing_leaves:
            while True:
                encoded = leaf.encode_next()
                if encoded is None:
                    break
                obj, chunks = encoded
                job.ticket.set_expected(obj.object_id, len(chunks))
                for chunk in chunks:
                    leaf.publish(chunk)
                job.ticket.mark_staged(obj.object_id)
            leaf.finish()
        job.serialized_done = True
        threading.Thread(target=self._dispatch, args=(job,), daemon=True).start()
        return job

    def _dispatch(self, job: CheckpointJob) -> None:
        try:
            while True:
                chunk = job.provider.poll()
                if chunk is END:
                    break
                if chunk is None:
                    raise RuntimeError("stream stalled after inline serialization")
                job.trace.record(chunk)
                fid = chunk.placement.file_id
                inplace = (chunk.source_tier is Tier.HOST and not chunk.serialized
                           and self.config.host_inplace)
                region = None
                if not inplace:
                    timeout = (None if self.config.cache_timeout_ns is None
                               else self.config.cache_timeout_ns / NS_PER_S)
                    region = self.cache.acquire(chunk.length, timeout)
                with self._lock:
                    job.dispatched[fid] += 1
                item = _Item(job, chunk, region)
                if inplace:
                    self._pool.submit(self._flush, item)
                elif chunk.source_tier is Tier.DEVICE:
                    self._copy_q.put(item)
                else:
                    region.view[:] = chunk.data_ref
                    if not chunk.serialized:
                        job.ticket.chunk_staged(chunk.object_id)
                    self._pool.submit(self._flush, item)
        except Exception as exc:
            job.fail(exc)
            return
        with self._lock:
            job.dispatch_done = True
        for fid in job.files:
            self._maybe_finalize(job, fid)

    def _copy_loop(self) -> None:
        while True:
            item = self._copy_q.get()
            start = self.clock()
            t0 = self._now_ns()
            item.region.view[:] = item.chunk.data_ref
            pace = item.chunk.length * self.config.byte_scale / self.config.d2h_bandwidth
            remaining = pace - (self.clock() - start)
            if remaining > 0:
                time.sleep(remaining)
            self.timeline.add(item.job.checkpoint_id, self.rank_id, item.chunk.object_id, Op.STAGE,
                              t0, self._now_ns(), item.chunk.length * self.config.byte_scale)
            item.job.ticket.chunk_staged(item.chunk.object_id)
            self._pool.submit(self._flush, item)

    def _flush(self, item: _Item) -> None:
        job, chunk = item.job, item.chunk
        fid = chunk.placement.file_id
        handle = job.files[fid]
        t0 = self._now_ns()
        try:
            if not job.failed:
                if chunk.placement.mode is PlacementMode.APPEND:
                    offset = handle.reserve_append(chunk.length)
                else:
                    offset = chunk.placement.file_offset
                handle.write_region(offset, item.data, chunk.object_id, int(chunk.kind),
                                    chunk.object_offset)
        except OSError as exc:
            job.fail(exc)
        finally:
            if item.region is not None:
                self.cache.release(item.region)
        if job.failed:
            return
        self.timeline.add(job.checkpoint_id, self.rank_id, chunk.object_id, Op.FLUSH,
                          t0, self._now_ns(), chunk.length * self.config.byte_scale)
        if item.region is None:
            job.ticket.chunk_staged(chunk.object_id)
        job.ticket.chunk_persisted(chunk.object_id)
        with self._lock:
            job.written[fid] += 1
        self._maybe_finalize(job, fid)

    def _maybe_finalize(self, job: CheckpointJob, fid: str) -> None:
        with self._lock:
            handle = job.files[fid]
            if handle.finalized or job.failed or not job.dispatch_done:
                return
            if job.written[fid] < job.dispatched[fid]:
                return
            try:
                handle.finalize()
            except Exception as exc:
                job.fail(exc)
                return
        job.ticket.file_finalized(fid)

    def wait_persisted(self, ticket: TransferTicket, timeout: float | None = None) -> float:
        start = self.clock()
        if not ticket.persisted_done.wait(timeout):
            raise TimeoutError("checkpoint did not persist in time")
        ticket.raise_if_failed()
        return self.clock() - start

    def wait_snapshot(self, ticket: TransferTicket, timeout: float | None = None) -> float:
        start = self.clock()
        if not ticket.snapshot_done.wait(timeout):
            raise TimeoutError("snapshot did not complete in time")
        ticket.raise_if_failed()
        return self.clock() - start

    def shutdown(self) -> None:
        self._pool.shutdown(wait=True)
