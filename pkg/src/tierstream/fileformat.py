"""On-disk checkpoint format.

Layout of one checkpoint file::

    [0, 4096)                      header block: magic, version, plan hash, zero padding
    [4096, tensor_region_end)      raw objects at precomputed, aligned offsets
    [tensor_region_end, footer)    serialized chunks, log-appended in any interleaving
    footer                         entry table + checksum, then footer_length (u64)

Footer, little-endian::

    magic            8 B   b"TSCKPT01"
    version          u32
    tensor_region_end u64
    entry_count      u64
    entries          entry_count x 41 B (object_id u64, kind u8, file_offset u64,
                     length u64, object_offset_base u64, checksum u64)
    footer_checksum  u64   FNV-1a over every footer byte before it
    footer_length    u64   total footer size including this word

Each entry describes one written chunk; its checksum covers exactly those
bytes. Entry kind 2 describes the header block itself. Bytes not covered by
any entry (alignment padding) must be zero.

A checkpoint directory holds one subdirectory per rank and a manifest written
last, atomically, as the commit record.
"""

from __future__ import annotations

import os
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

from . import tlv
from .checksum import fnv1a64
from .model import ObjectKind, Precision, RankState, StateObject, Tier
from .providers import ChunkDescriptor, FilePlan, PlacementMode

MAGIC = b"TSCKPT01"
FORMAT_VERSION = 1
HEADER_SIZE = 4096
KIND_RAW = int(ObjectKind.RAW_BUFFER)
KIND_STRUCTURED = int(ObjectKind.STRUCTURED)
KIND_HEADER = 2
HEADER_OBJECT_ID = 0

_HEADER = struct.Struct("<8sIIQ")
_PREAMBLE = struct.Struct("<8sIQQ")
_ENTRY = struct.Struct("<QBQQQQ")
_U64 = struct.Struct("<Q")
ENTRY_SIZE = _ENTRY.size
FILE_SUFFIX = ".tsck"
MANIFEST_NAME = "MANIFEST.tlv"


class CheckpointError(Exception):
    pass


class FormatError(CheckpointError):
    pass


class IncompleteFileError(CheckpointError):
    """No checksum-valid footer: the file was never finalized or was torn."""

    def __init__(self, path, reason: str):
        self.path = str(path)
        super().__init__(f"{path}: incomplete file (footer): {reason}")


class HeaderError(CheckpointError):
    def __init__(self, path, reason: str):
        self.path = str(path)
        super().__init__(f"{path}: bad header block: {reason}")


class ChecksumError(CheckpointError):
    def __init__(self, path, object_id: int, file_offset: int):
        self.path = str(path)
        self.object_id = object_id
        self.file_offset = file_offset
        super().__init__(f"{path}: checksum mismatch in object {object_id} at offset {file_offset}")


class PaddingError(CheckpointError):
    def __init__(self, path, file_offset: int):
        self.path = str(path)
        self.file_offset = file_offset
        super().__init__(f"{path}: nonzero byte in alignment padding at offset {file_offset}")


class MissingFileError(CheckpointError):
    pass


class IncompleteCheckpointError(CheckpointError):
    pass


@dataclass(frozen=True)
class FooterEntry:
    object_id: int
    kind: int
    file_offset: int
    length: int
    object_offset_base: int
    checksum: int

    @property
    def end(self) -> int:
        return self.file_offset + self.length


@dataclass
class Footer:
    version: int
    tensor_region_end: int
    entries: list[FooterEntry]
    footer_offset: int
    footer_length: int


def encode_footer(entries: list[FooterEntry], tensor_region_end: int) -> bytes:
    out = bytearray(_PREAMBLE.pack(MAGIC, FORMAT_VERSION, tensor_region_end, len(entries)))
    for e in entries:
        out += _ENTRY.pack(e.object_id, e.kind, e.file_offset, e.length, e.object_offset_base, e.checksum)
    out += _U64.pack(fnv1a64(out))
    out += _U64.pack(len(out) + 8)
    return bytes(out)


def check_entries(entries: Iterable[FooterEntry], tensor_region_end: int) -> list[FooterEntry]:
    """Sort by offset and reject overlaps or region violations."""
    ordered = sorted(entries, key=lambda e: e.file_offset)
    prev_end = 0
    for e in ordered:
        if e.length <= 0:
            raise FormatError(f"entry for object {e.object_id} has no bytes")
        if e.file_offset < prev_end:
            raise FormatError(f"entry for object {e.object_id} at {e.file_offset} overlaps previous")
        if e.kind == KIND_RAW and e.end > tensor_region_end:
            raise FormatError(f"raw object {e.object_id} extends past the tensor region")
        if e.kind == KIND_STRUCTURED and e.file_offset < tensor_region_end:
            raise FormatError(f"structured object {e.object_id} placed inside the tensor region")
        prev_end = e.end
    return ordered


class CheckpointFile:
    """Writable handle for one checkpoint file.

    Positional writes at disjoint offsets may come from many threads. The
    append cursor is a lock-protected reservation point; ``finalize`` runs once.
    """

    def __init__(self, path, plan: FilePlan, overwrite: bool = False, durable: bool = False):
        self.path = Path(path)
        self.plan = plan
        self.durable = durable
        if self.path.exists() and not overwrite:
            raise FileExistsError(f"{self.path} exists (pass overwrite=True to replace)")
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.fd = os.open(self.path, os.O_RDWR | os.O_CREAT | os.O_TRUNC, 0o644)
        self._lock = threading.Lock()
        self._cursor = plan.tensor_region_end
        self._entries: list[FooterEntry] = []
        self.finalized = False
        self.bytes_written = 0
        header = bytearray(HEADER_SIZE)
        _HEADER.pack_into(header, 0, MAGIC, FORMAT_VERSION, 0, plan.plan_hash())
        os.pwrite(self.fd, header, 0)
        self._entries.append(FooterEntry(HEADER_OBJECT_ID, KIND_HEADER, 0, HEADER_SIZE, 0, fnv1a64(header)))
        os.ftruncate(self.fd, max(plan.tensor_region_end, HEADER_SIZE))

    @property
    def tensor_region_end(self) -> int:
        return self.plan.tensor_region_end

    @property
    def append_cursor(self) -> int:
        return self._cursor

    def reserve_append(self, length: int) -> int:
        if length <= 0:
            raise ValueError("zero-length append")
        with self._lock:
            offset = self._cursor
            self._cursor += length
        return offset

    def write_region(self, offset: int, data, object_id: int, kind: int, object_offset: int,
                     checksum: int | None = None) -> FooterEntry:
        view = memoryview(data).cast("B")
        if len(view) == 0:
            raise ValueError("zero-length write")
        if self.finalized:
            raise FormatError(f"{self.path} already finalized")
        written = 0
        while written < len(view):
            written += os.pwrite(self.fd, view[written:], offset + written)
        entry = FooterEntry(object_id, kind, offset, len(view), object_offset,
                            fnv1a64(view) if checksum is None else checksum)
        with self._lock:
            self._entries.append(entry)
            self.bytes_written += len(view)
        return entry

    def write_fixed(self, chunk: ChunkDescriptor, data=None) -> FooterEntry:
        if chunk.placement.mode is not PlacementMode.FIXED:
            raise ValueError("chunk does not have a fixed placement")
        return self.write_region(chunk.placement.file_offset, chunk.data_ref if data is None else data,
                                 chunk.object_id, int(chunk.kind), chunk.object_offset)

    def append_chunk(self, chunk: ChunkDescriptor, data=None) -> int:
        if chunk.placement.mode is not PlacementMode.APPEND:
            raise ValueError("chunk does not have an append placement")
        if chunk.placement.file_id != self.plan.file_id:
            raise ValueError(f"chunk targets {chunk.placement.file_id}, not {self.plan.file_id}")
        offset = self.reserve_append(chunk.length)
        self.write_region(offset, chunk.data_ref if data is None else data,
                          chunk.object_id, int(chunk.kind), chunk.object_offset)
        return offset

    @property
    def entries(self) -> list[FooterEntry]:
        with self._lock:
            return list(self._entries)

    def finalize(self, entries: list[FooterEntry] | None = None) -> Footer:
        """Write the footer after the last appended byte and close the file."""
        if self.finalized:
            raise FormatError(f"{self.path} already finalized")
        with self._lock:
            chosen = list(self._entries) if entries is None else list(entries)
            ordered = check_entries(chosen, self.tensor_region_end)
            footer_offset = max([self._cursor, self.tensor_region_end, HEADER_SIZE]
                                + [e.end for e in ordered])
            blob = encode_footer(ordered, self.tensor_region_end)
            os.pwrite(self.fd, blob, footer_offset)
            os.ftruncate(self.fd, footer_offset + len(blob))
            if self.durable:
                os.fsync(self.fd)
            os.close(self.fd)
            self.finalized = True
        return Footer(FORMAT_VERSION, self.tensor_region_end, ordered, footer_offset, len(blob))

    def abort(self) -> None:
        """Close without a footer; the file stays detectably incomplete."""
        if not self.finalized:
            os.close(self.fd)
            self.finalized = True


def open_for_write(path, plan: FilePlan, overwrite: bool = False, durable: bool = False) -> CheckpointFile:
    return CheckpointFile(path, plan, overwrite=overwrite, durable=durable)


def read_footer(path) -> Footer:
    path = Path(path)
    with open(path, "rb") as fh:
        fh.seek(0, os.SEEK_END)
        size = fh.tell()
        min_len = _PREAMBLE.size + 16
        if size < HEADER_SIZE + min_len:
            raise IncompleteFileError(path, f"file too short ({size} bytes)")
        fh.seek(size - 8)
        footer_length = _U64.unpack(fh.read(8))[0]
        if footer_length < min_len or footer_length > size - HEADER_SIZE:
            raise IncompleteFileError(path, f"implausible footer length {footer_length}")
        footer_offset = size - footer_length
        fh.seek(footer_offset)
        blob = fh.read(footer_length)
    body = blob[:-16]
    stored = _U64.unpack_from(blob, footer_length - 16)[0]
    if fnv1a64(body) != stored:
        raise IncompleteFileError(path, "footer checksum mismatch")
    magic, version, tensor_end, count = _PREAMBLE.unpack_from(body, 0)
    if magic != MAGIC:
        raise IncompleteFileError(path, "bad footer magic")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    if len(body) != _PREAMBLE.size + count * ENTRY_SIZE:
        raise IncompleteFileError(path, "entry table length mismatch")
    entries = [FooterEntry(*_ENTRY.unpack_from(body, _PREAMBLE.size + i * ENTRY_SIZE))
               for i in range(count)]
    for e in entries:
        if e.end > footer_offset:
            raise FormatError(f"{path}: entry for object {e.object_id} runs into the footer")
    check_entries(entries, tensor_end)
    return Footer(version, tensor_end, entries, footer_offset, footer_length)


def verify_file(path) -> tuple[Footer, bytes]:
    """Full integrity pass over one file; returns the footer and file bytes."""
    path = Path(path)
    footer = read_footer(path)
    data = path.read_bytes()
    magic, version, _, _ = _HEADER.unpack_from(data, 0)
    headers = [e for e in footer.entries if e.kind == KIND_HEADER]
    if len(headers) != 1 or headers[0].file_offset != 0 or headers[0].length != HEADER_SIZE:
        raise HeaderError(path, "header entry missing")
    view = memoryview(data)
    cursor = 0
    for e in footer.entries:
        if any(view[cursor:e.file_offset]):
            raise PaddingError(path, cursor + next(i for i, b in enumerate(view[cursor:e.file_offset]) if b))
        if fnv1a64(view[e.file_offset:e.end]) != e.checksum:
            if e.kind == KIND_HEADER:
                raise HeaderError(path, "header checksum mismatch")
            raise ChecksumError(path, e.object_id, e.file_offset)
        cursor = e.end
    if any(view[cursor:footer.footer_offset]):
        raise PaddingError(path, cursor)
    if magic != MAGIC or version != FORMAT_VERSION:
        raise HeaderError(path, "bad magic or version")
    return footer, data


def read_objects(path) -> dict[int, tuple[int, bytes]]:
    """Reassemble every object in a verified file: object_id -> (kind, bytes)."""
    footer, data = verify_file(path)
    parts: dict[int, list[FooterEntry]] = {}
    for e in footer.entries:
        if e.kind != KIND_HEADER:
            parts.setdefault(e.object_id, []).append(e)
    out = {}
    view = memoryview(data)
    for oid, chunks in parts.items():
        chunks.sort(key=lambda e: e.object_offset_base)
        kinds = {e.kind for e in chunks}
        if len(kinds) != 1:
            raise FormatError(f"{path}: object {oid} has mixed entry kinds")
        buf = bytearray()
        for e in chunks:
            if e.object_offset_base != len(buf):
                raise FormatError(f"{path}: object {oid} has a gap or overlap at {len(buf)}")
            buf += view[e.file_offset:e.end]
        out[oid] = (kinds.pop(), bytes(buf))
    return out


# manifest ---------------------------------------------------------------------


def object_record(obj: StateObject) -> dict[str, Any]:
    return {
        "object_id": obj.object_id,
        "name": obj.name,
        "kind": int(obj.kind),
        "tier": obj.tier.value,
        "precision": obj.precision.value,
        "size_bytes": obj.size_bytes if obj.is_raw else None,
        "pattern_key": obj.pattern_key,
        "pattern_offset": obj.pattern_offset,
    }


@dataclass
class CheckpointManifest:
    checkpoint_id: int
    iteration: int
    layout: dict[str, int]
    ranks: list[dict[str, Any]] = field(default_factory=list)
    complete: bool = False

    @classmethod
    def for_ranks(cls, checkpoint_id: int, iteration: int, layout: dict[str, int],
                  ranks: Iterable[RankState]) -> "CheckpointManifest":
        entries = []
        for rank in ranks:
            files: dict[str, list] = {}
            for obj in rank.objects:
                files.setdefault(obj.file_id, []).append(object_record(obj))
            entries.append({"rank_id": rank.rank_id, "coords": list(rank.coordinates),
                            "files": files})
        return cls(checkpoint_id, iteration, dict(layout), entries)

    def to_value(self) -> dict[str, Any]:
        return {"checkpoint_id": self.checkpoint_id, "iteration": self.iteration,
                "layout": self.layout, "ranks": self.ranks, "complete": int(self.complete)}

    @classmethod
    def from_value(cls, value: dict[str, Any]) -> "CheckpointManifest":
        try:
            return cls(value["checkpoint_id"], value["iteration"], value["layout"],
                       value["ranks"], bool(value["complete"]))
        except (KeyError, TypeError) as exc:
            raise FormatError(f"malformed manifest: {exc}") from exc


def checkpoint_dir(root, checkpoint_id: int) -> Path:
    return Path(root) / f"ckpt-{checkpoint_id:06d}"


def file_path(ckpt_dir, rank_id: int, file_id: str) -> Path:
    return Path(ckpt_dir) / f"rank{rank_id:05d}" / f"{file_id}{FILE_SUFFIX}"


def write_manifest(ckpt_dir, manifest: CheckpointManifest) -> Path:
    """Atomic commit: write to a temporary name, then rename into place."""
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    final = ckpt_dir / MANIFEST_NAME
    tmp = ckpt_dir / (MANIFEST_NAME + ".tmp")
    tmp.write_bytes(tlv.encode(manifest.to_value()))
    os.replace(tmp, final)
    return final


def read_manifest(path) -> CheckpointManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.exists():
        raise IncompleteCheckpointError(f"no manifest at {path}")
    try:
        value = tlv.decode(path.read_bytes())
    except tlv.DecodingError as exc:
        raise IncompleteCheckpointError(f"unreadable manifest {path}: {exc}") from exc
    return CheckpointManifest.from_value(value)


def restore(manifest_path, root=None) -> list[RankState]:
    """Rebuild every rank's objects from a committed checkpoint.

    ``root`` is the checkpoint directory; it defaults to the manifest's own.
    """
    manifest_path = Path(manifest_path)
    manifest = read_manifest(manifest_path)
    if not manifest.complete:
        raise IncompleteCheckpointError(f"checkpoint {manifest.checkpoint_id} never committed")
    ckpt_dir = Path(root) if root is not None else (
        manifest_path if manifest_path.is_dir() else manifest_path.parent)
    ranks = []
    for rank_rec in manifest.ranks:
        rid = rank_rec["rank_id"]
        objects = []
        for file_id, records in rank_rec["files"].items():
            path = file_path(ckpt_dir, rid, file_id)
            if not path.exists():
                raise MissingFileError(f"rank {rid}: missing file {path}")
            stored = read_objects(path)
            for rec in records:
                oid = rec["object_id"]
                if oid not in stored:
                    raise FormatError(f"{path}: object {oid} absent from footer")
                kind, raw = stored[oid]
                objects.append(_rebuild(rec, file_id, kind, raw, manifest.iteration, path))
        ranks.append(RankState(rid, tuple(rank_rec["coords"]), objects))
    return ranks


def _rebuild(rec, file_id, kind, raw: bytes, iteration: int, path) -> StateObject:
    if kind != rec["kind"]:
        raise FormatError(f"{path}: object {rec['object_id']} kind mismatch")
    common = dict(object_id=rec["object_id"], name=rec["name"], tier=Tier(rec["tier"]),
                  file_id=file_id, precision=Precision(rec["precision"]),
                  pattern_key=rec["pattern_key"], pattern_offset=rec["pattern_offset"],
                  iteration=iteration)
    if kind == KIND_RAW:
        if len(raw) != rec["size_bytes"]:
            raise FormatError(f"{path}: object {rec['object_id']} has {len(raw)} bytes, "
                              f"expected {rec['size_bytes']}")
        return StateObject(kind=ObjectKind.RAW_BUFFER, size_bytes=len(raw),
                           payload=bytearray(raw), **common)
    try:
        value = tlv.decode(raw)
    except tlv.DecodingError as exc:
        raise FormatError(f"{path}: object {rec['object_id']} does not decode: {exc}") from exc
    obj = StateObject(kind=ObjectKind.STRUCTURED, payload=value, **common)
    obj.size_bytes = len(raw)
    return obj


def verify_checkpoint(manifest_path) -> dict[str, int]:
    """Checksum pass over every file of a checkpoint; returns counts."""
    ranks = restore(manifest_path)
    return {"ranks": len(ranks), "objects": sum(len(r.objects) for r in ranks),
            "files": sum(len(r.files) for r in ranks)}
