"""State providers: heterogeneous objects exposed as one stream of byte chunks.

Raw buffers are exposed zero-copy as memoryview slices of their payload, with a
precomputed fixed file offset. Structured values are encoded by a serializer
(inline or on a background worker) into bounded chunks placed by log-structured
append after the fixed region. A composite merges providers and, by default,
emits raw chunks first so serialization overlaps bulk I/O.
"""

from __future__ import annotations

import enum
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

from . import tlv
from .checksum import fnv1a64
from .model import ObjectKind, StateObject, Tier

HEADER_RESERVED = 4096
DEFAULT_ALIGNMENT = 4096
RAW_CHUNK_BYTES = 16_000_000
SERIALIZED_CHUNK_BYTES = 1_000_000


class PlacementMode(enum.Enum):
    FIXED = "fixed"
    APPEND = "append"


@dataclass(frozen=True)
class Placement:
    mode: PlacementMode
    file_id: str
    file_offset: int | None = None

    @classmethod
    def fixed(cls, file_id: str, offset: int) -> "Placement":
        return cls(PlacementMode.FIXED, file_id, offset)

    @classmethod
    def append(cls, file_id: str) -> "Placement":
        return cls(PlacementMode.APPEND, file_id)


@dataclass(frozen=True, eq=False)
class ChunkDescriptor:
    object_id: int
    object_offset: int
    length: int
    source_tier: Tier
    data_ref: memoryview
    placement: Placement
    serialized: bool = False

    @property
    def kind(self) -> ObjectKind:
        return ObjectKind.STRUCTURED if self.serialized else ObjectKind.RAW_BUFFER


class _EndOfStream:
    def __repr__(self):
        return "END"


END = _EndOfStream()


class PlanError(ValueError):
    pass


class StreamError(RuntimeError):
    """A provider failed to produce an object's chunks."""

    def __init__(self, object_id: int, cause: BaseException):
        self.object_id = object_id
        self.cause = cause
        super().__init__(f"object {object_id}: {cause}")


def align_up(value: int, alignment: int) -> int:
    return -(-value // alignment) * alignment


@dataclass
class FilePlan:
    file_id: str
    alignment: int = DEFAULT_ALIGNMENT
    header_reserved: int = HEADER_RESERVED
    fixed_assignments: dict[int, tuple[int, int]] = field(default_factory=dict)
    appended: list[int] = field(default_factory=list)
    tensor_region_end: int = HEADER_RESERVED

    @property
    def append_region_start(self) -> int:
        return self.tensor_region_end

    def plan_hash(self) -> int:
        canonical = {
            "file_id": self.file_id,
            "alignment": self.alignment,
            "header_reserved": self.header_reserved,
            "fixed": [[oid, off, n] for oid, (off, n) in self.fixed_assignments.items()],
            "appended": list(self.appended),
            "tensor_region_end": self.tensor_region_end,
        }
        return fnv1a64(tlv.encode(canonical))


@dataclass
class LayoutPlan:
    files: dict[str, FilePlan]

    def placement_of(self, obj: StateObject) -> tuple[int, int] | None:
        return self.files[obj.file_id].fixed_assignments.get(obj.object_id)


def plan_layout(objects: Sequence[StateObject], alignment: int = DEFAULT_ALIGNMENT,
                header_reserved: int = HEADER_RESERVED) -> LayoutPlan:
    """Precompute fixed offsets for raw objects, file by file.

    Raw objects are placed largest first (ties by object_id), each aligned up to
    ``alignment``, starting after the reserved header block. Structured objects
    are listed for the append region that begins where the fixed region ends.
    """
    if alignment <= 0:
        raise PlanError("alignment must be positive")
    seen: set[int] = set()
    by_file: dict[str, list[StateObject]] = {}
    for obj in objects:
        if obj.object_id in seen:
            raise PlanError(f"duplicate object_id {obj.object_id}")
        seen.add(obj.object_id)
        if obj.is_raw and not obj.size_bytes:
            raise PlanError(f"raw object {obj.object_id} has no size")
        by_file.setdefault(obj.file_id, []).append(obj)

    files = {}
    for file_id in sorted(by_file):
        members = by_file[file_id]
        plan = FilePlan(file_id, alignment, header_reserved, tensor_region_end=header_reserved)
        cursor = header_reserved
        raw = sorted((o for o in members if o.is_raw), key=lambda o: (-o.size_bytes, o.object_id))
        for obj in raw:
            offset = align_up(cursor, alignment)
            plan.fixed_assignments[obj.object_id] = (offset, obj.size_bytes)
            cursor = offset + obj.size_bytes
        plan.tensor_region_end = cursor
        plan.appended = [o.object_id for o in members if not o.is_raw]
        files[file_id] = plan
    return LayoutPlan(files)


class Notifier:
    """Wakes a stream consumer when a background producer makes progress.

    Threaded consumers wait on the condition; simulated consumers register
    one-shot callbacks.
    """

    def __init__(self):
        self.cond = threading.Condition()
        self._callbacks: list[Callable[[], None]] = []

    def notify(self) -> None:
        with self.cond:
            callbacks, self._callbacks = self._callbacks, []
            self.cond.notify_all()
        for cb in callbacks:
            cb()

    def once(self, callback: Callable[[], None]) -> None:
        with self.cond:
            self._callbacks.append(callback)


class ProviderKind(enum.Enum):
    RAW = "raw"
    SERIALIZING = "serializing"
    COMPOSITE = "composite"


class StateProvider:
    kind: ProviderKind

    def poll(self):
        """Next ready chunk, ``None`` if nothing is ready yet, or ``END``."""
        raise NotImplementedError

    def leaves(self) -> list["StateProvider"]:
        return [self]

    def attach(self, notifier: Notifier) -> None:
        self.notifier = notifier

    def step(self) -> bool:
        """Do one unit of pending producer work inline; False if none is left."""
        return False


class RawProvider(StateProvider):
    kind = ProviderKind.RAW

    def __init__(self, objects: Iterable[StateObject], plan: LayoutPlan,
                 max_chunk_bytes: int = RAW_CHUNK_BYTES):
        if max_chunk_bytes <= 0:
            raise ValueError("max_chunk_bytes must be positive")
        self.objects = [o for o in objects if o.is_raw]
        # same order the plan laid them out in: largest first
        self.objects.sort(key=lambda o: (o.file_id, -o.size_bytes, o.object_id))
        self.plan = plan
        self.max_chunk_bytes = max_chunk_bytes
        self.notifier = Notifier()
        self._index = 0
        self._offset = 0

    @property
    def total_bytes(self) -> int:
        return sum(o.size_bytes for o in self.objects)

    def poll(self):
        if self._index >= len(self.objects):
            return END
        obj = self.objects[self._index]
        if obj.payload is None:
            raise StreamError(obj.object_id, ValueError("raw object has no payload"))
        base, _ = self.plan.placement_of(obj)
        length = min(self.max_chunk_bytes, obj.size_bytes - self._offset)
        chunk = ChunkDescriptor(
            object_id=obj.object_id,
            object_offset=self._offset,
            length=length,
            source_tier=obj.tier,
            data_ref=memoryview(obj.payload)[self._offset:self._offset + length],
            placement=Placement.fixed(obj.file_id, base + self._offset),
        )
        self._offset += length
        if self._offset >= obj.size_bytes:
            self._index += 1
            self._offset = 0
        return chunk


def serialize_structured(obj: StateObject, sink: Callable[[ChunkDescriptor], None],
                         max_chunk_bytes: int = SERIALIZED_CHUNK_BYTES) -> int:
    """Encode ``obj``'s value and emit it as APPEND chunks; returns total bytes.

    The value is read once, at call time. Sets ``obj.size_bytes`` as a side
    effect, since a structured object's size is only known after encoding.
    """
    if obj.kind is not ObjectKind.STRUCTURED:
        raise TypeError(f"object {obj.object_id} is not structured")
    encoded = memoryview(tlv.encode(obj.payload))
    total = len(encoded)
    for start in range(0, total, max_chunk_bytes):
        n = min(max_chunk_bytes, total - start)
        sink(ChunkDescriptor(
            object_id=obj.object_id,
            object_offset=start,
            length=n,
            source_tier=Tier.HOST,
            data_ref=encoded[start:start + n],
            placement=Placement.append(obj.file_id),
            serialized=True,
        ))
    obj.size_bytes = total
    return total


class SerializingProvider(StateProvider):
    """Chunks of structured objects, available as serialization progresses.

    Work can be driven three ways: ``step()`` inline (deterministic mode),
    ``run()`` on a background thread, or by an external scheduler that calls
    ``encode_next()`` and then ``publish()`` per chunk at its own pace.
    """

    kind = ProviderKind.SERIALIZING

    def __init__(self, objects: Iterable[StateObject],
                 max_chunk_bytes: int = SERIALIZED_CHUNK_BYTES):
        self.objects = [o for o in objects if not o.is_raw]
        self.max_chunk_bytes = max_chunk_bytes
        self.notifier = Notifier()
        self._pending = deque(self.objects)
        self._ready: deque[ChunkDescriptor] = deque()
        self._lock = threading.Lock()
        self._finished = not self.objects
        self._error: StreamError | None = None

    @property
    def finished(self) -> bool:
        return self._finished

    def encode_next(self) -> tuple[StateObject, list[ChunkDescriptor]] | None:
        """Encode the next pending object without publishing its chunks."""
        with self._lock:
            if not self._pending:
                return None
            obj = self._pending.popleft()
        chunks: list[ChunkDescriptor] = []
        try:
            serialize_structured(obj, chunks.append, self.max_chunk_bytes)
        except Exception as exc:  # surfaced to the consumer through poll()
            self.fail(StreamError(obj.object_id, exc))
            return None
        return obj, chunks

    def publish(self, chunk: ChunkDescriptor) -> None:
        with self._lock:
            self._ready.append(chunk)
        self.notifier.notify()

    def finish(self) -> None:
        with self._lock:
            self._finished = True
        self.notifier.notify()

    def fail(self, error: StreamError) -> None:
        with self._lock:
            self._error = error
            self._pending.clear()
            self._finished = True
        self.notifier.notify()

    def step(self) -> bool:
        encoded = self.encode_next()
        if encoded is None:
            if not self._pending and not self._finished and self._error is None:
                self.finish()
            return False
        for chunk in encoded[1]:
            self.publish(chunk)
        if not self._pending:
            self.finish()
        return True

    def run(self) -> None:
        while self.step():
            pass
        if not self._finished:
            self.finish()

    def poll(self):
        with self._lock:
            if self._ready:
                return self._ready.popleft()
            if self._error is not None:
                raise self._error
            if self._finished and not self._pending:
                return END
            return None


def raw_first(leaves: Sequence[StateProvider]) -> list[StateProvider]:
    """Default emission policy: every raw leaf before any serializing leaf."""
    return sorted(leaves, key=lambda p: 0 if p.kind is ProviderKind.RAW else 1)


class CompositeProvider(StateProvider):
    """Merges providers hierarchically into one stream.

    ``policy`` orders the flattened leaves; the first leaf with a ready chunk
    wins, so a serialized chunk is only emitted when no raw chunk is ready.
    """

    kind = ProviderKind.COMPOSITE

    def __init__(self, children: Sequence[StateProvider],
                 policy: Callable[[Sequence[StateProvider]], list[StateProvider]] = raw_first):
        self.children = list(children)
        self.policy = policy
        self.notifier = Notifier()
        for leaf in self.leaves():
            leaf.attach(self.notifier)
        self._order = self.policy(self.leaves())
        self._ended: set[int] = set()

    def leaves(self) -> list[StateProvider]:
        out = []
        for child in self.children:
            out.extend(child.leaves())
        return out

    def attach(self, notifier: Notifier) -> None:
        self.notifier = notifier
        for leaf in self.leaves():
            leaf.attach(notifier)

    def poll(self):
        for i, leaf in enumerate(self._order):
            if i in self._ended:
                continue
            chunk = leaf.poll()
            if chunk is END:
                self._ended.add(i)
                continue
            if chunk is not None:
                return chunk
        if len(self._ended) == len(self._order):
            return END
        return None

    def step(self) -> bool:
        return any(leaf.step() for leaf in self._order)


def next_chunk(provider: StateProvider, *, inline: bool = False, timeout: float | None = None):
    """Blocking pull of the next chunk, or ``END``.

    With ``inline=True`` no background worker is assumed: when nothing is ready
    the caller performs the next unit of serialization itself, which makes the
    emission order fully deterministic.
    """
    while True:
        chunk = provider.poll()
        if chunk is not None:
            return chunk
        if inline:
            if not provider.step():
                chunk = provider.poll()
                if chunk is None:
                    raise RuntimeError("provider stalled with no pending work")
                return chunk
            continue
        with provider.notifier.cond:
            chunk = provider.poll()
            if chunk is not None:
                return chunk
            if not provider.notifier.cond.wait(timeout):
                raise TimeoutError("no chunk became ready in time")


def build_provider(objects: Sequence[StateObject], plan: LayoutPlan,
                   raw_chunk_bytes: int = RAW_CHUNK_BYTES,
                   serialized_chunk_bytes: int = SERIALIZED_CHUNK_BYTES,
                   policy=raw_first) -> CompositeProvider:
    """Per-file raw and serializing leaves merged into one rank-level stream.

    Raw leaves are ordered by their file's raw volume, largest first.
    """
    by_file: dict[str, list[StateObject]] = {}
    for obj in objects:
        by_file.setdefault(obj.file_id, []).append(obj)
    raw_volume = {f: sum(o.size_bytes for o in objs if o.is_raw) for f, objs in by_file.items()}
    children: list[StateProvider] = []
    for file_id in sorted(by_file, key=lambda f: (-raw_volume[f], f)):
        objs = by_file[file_id]
        file_children: list[StateProvider] = []
        if any(o.is_raw for o in objs):
            file_children.append(RawProvider(objs, plan, raw_chunk_bytes))
        if any(not o.is_raw for o in objs):
            file_children.append(SerializingProvider(objs, serialized_chunk_bytes))
        children.append(CompositeProvider(file_children, policy))
    return CompositeProvider(children, policy)


@dataclass
class TraceRecord:
    object_id: int
    length: int
    serialized: bool


class ChunkTrace:
    """Emission-order record of a checkpoint's chunks."""

    def __init__(self, records: Iterable[TraceRecord] = ()):
        self.records: list[TraceRecord] = list(records)

    def record(self, chunk: ChunkDescriptor) -> None:
        self.records.append(TraceRecord(chunk.object_id, chunk.length, chunk.serialized))

    @property
    def total_bytes(self) -> int:
        return sum(r.length for r in self.records)

    @property
    def serialized_bytes(self) -> int:
        return sum(r.length for r in self.records if r.serialized)


def serialized_fraction(trace: ChunkTrace) -> float:
    """Share of checkpoint bytes that went through the structured serializer."""
    total = trace.total_bytes
    if not trace.records or total == 0:
        raise ValueError("empty chunk trace")
    return trace.serialized_bytes / total
