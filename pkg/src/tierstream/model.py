"""Heterogeneous training-state model and 3D-parallel shard layouts.

Payload bytes are synthetic: every raw buffer is filled from a counter-based
splitmix64 stream keyed by ``(pattern_key, iteration)``. Because the stream is
addressable by byte offset, a ZeRO-1 optimizer shard is exactly the slice of
its unsharded buffer's stream, and any payload can be regenerated as an oracle
without storing golden copies.
"""

from __future__ import annotations

import csv
import enum
import hashlib
import io
from dataclasses import dataclass, field
from typing import Any, Iterable

import numpy as np

from . import tlv

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


class Tier(enum.Enum):
    DEVICE = "device"
    HOST = "host"
    PERSISTENT = "persistent"


class ObjectKind(enum.IntEnum):
    RAW_BUFFER = 0
    STRUCTURED = 1


class Precision(enum.Enum):
    FP16 = "fp16"
    FP32 = "fp32"
    OPAQUE = "opaque"


class LayoutError(ValueError):
    pass


def _splitmix64(x: int) -> int:
    x = (x + _GOLDEN) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def pattern_key(seed: int, label: str) -> int:
    """Stable 63-bit key for a logical buffer (fits the int64 TLV encoding)."""
    digest = hashlib.blake2b(f"{seed}/{label}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


def fill_pattern(key: int, iteration: int, offset: int, length: int) -> np.ndarray:
    """Bytes ``[offset, offset + length)`` of the stream for ``(key, iteration)``."""
    if length <= 0:
        return np.zeros(0, dtype=np.uint8)
    stream = np.uint64(_splitmix64(_splitmix64(key) ^ ((iteration * _GOLDEN) & _MASK64)))
    first = offset // 8
    last = (offset + length + 7) // 8
    x = np.arange(first, last, dtype=np.uint64)
    x *= np.uint64(_GOLDEN)
    x += stream
    x ^= x >> np.uint64(30)
    x *= np.uint64(0xBF58476D1CE4E5B9)
    x ^= x >> np.uint64(27)
    x *= np.uint64(0x94D049BB133111EB)
    x ^= x >> np.uint64(31)
    raw = x.astype("<u8", copy=False).view(np.uint8)
    start = offset - first * 8
    return raw[start:start + length]


@dataclass(eq=False)
class StateObject:
    """One checkpointable unit: a raw byte buffer or a structured value."""

    object_id: int
    name: str
    kind: ObjectKind
    tier: Tier
    file_id: str
    precision: Precision = Precision.OPAQUE
    size_bytes: int | None = None
    payload: Any = None
    pattern_key: int = 0
    pattern_offset: int = 0
    iteration: int = 0

    def __post_init__(self):
        if self.kind is ObjectKind.RAW_BUFFER:
            if self.size_bytes is None or self.size_bytes <= 0:
                raise LayoutError(f"raw object {self.name} needs a positive size")
            if self.payload is not None and len(self.payload) != self.size_bytes:
                raise LayoutError(f"raw object {self.name}: payload length != size_bytes")
        else:
            if self.tier is not Tier.HOST:
                raise LayoutError(f"structured object {self.name} must live on HOST")
            if self.size_bytes is not None:
                raise LayoutError(f"structured object {self.name} has no size before serialization")

    @property
    def is_raw(self) -> bool:
        return self.kind is ObjectKind.RAW_BUFFER

    def expected_bytes(self, iteration: int | None = None) -> bytes:
        """Oracle payload for a raw object at ``iteration`` (default: current)."""
        it = self.iteration if iteration is None else iteration
        return fill_pattern(self.pattern_key, it, self.pattern_offset, self.size_bytes).tobytes()


@dataclass
class RankState:
    rank_id: int
    coordinates: tuple[int, int, int]
    objects: list[StateObject] = field(default_factory=list)

    @property
    def files(self) -> dict[str, list[int]]:
        membership: dict[str, list[int]] = {}
        for obj in self.objects:
            membership.setdefault(obj.file_id, []).append(obj.object_id)
        return membership

    @property
    def raw_bytes(self) -> int:
        return sum(o.size_bytes for o in self.objects if o.is_raw)

    def by_id(self) -> dict[int, StateObject]:
        return {o.object_id: o for o in self.objects}

    def category_bytes(self) -> dict[str, int]:
        """Raw bytes by category (param / optim / host), as named by the generator."""
        out = {"param": 0, "optim": 0, "host": 0}
        for o in self.objects:
            if o.is_raw:
                category = o.name.split("/", 1)[0]
                out[category] = out.get(category, 0) + o.size_bytes
        return out


@dataclass(frozen=True)
class ModelSpec:
    n_params: int
    layers: int = 8
    hidden_dim: int = 0

    def __post_init__(self):
        if self.n_params <= 0:
            raise LayoutError("n_params must be > 0")
        if self.layers <= 0:
            raise LayoutError("layers must be > 0")

    @classmethod
    def from_architecture(cls, layers: int, hidden_dim: int) -> "ModelSpec":
        # 4d^2 attention + 8d^2 MLP per transformer block
        return cls(n_params=12 * layers * hidden_dim * hidden_dim, layers=layers, hidden_dim=hidden_dim)


@dataclass
class ShardLayout:
    spec: ModelSpec
    tp: int
    pp: int
    dp: int
    zero1: bool
    seed: int
    ranks: list[RankState]
    byte_scale: int = 1
    write_params_all_dp: bool = False

    def rank(self, tp_idx: int, pp_idx: int, dp_idx: int) -> RankState:
        return self.ranks[rank_index(self.tp, self.pp, tp_idx, pp_idx, dp_idx)]

    @property
    def total_raw_bytes(self) -> int:
        return sum(r.raw_bytes for r in self.ranks)


def estimate_checkpoint_bytes(spec: ModelSpec) -> tuple[int, int]:
    """(FP16 parameter bytes, FP32 master + momentum + variance bytes)."""
    return 2 * spec.n_params, 12 * spec.n_params


def split_even(total: int, parts: int) -> list[int]:
    """Uniform split; the remainder goes to the lowest indices."""
    base, rem = divmod(total, parts)
    return [base + (1 if i < rem else 0) for i in range(parts)]


def rank_index(tp: int, pp: int, tp_idx: int, pp_idx: int, dp_idx: int) -> int:
    # tp fastest, then pp; one DP replica occupies a contiguous block of tp*pp ranks
    return tp_idx + tp * (pp_idx + pp * dp_idx)


def _raw_object(oid, name, tier, file_id, precision, key, offset, size, materialize):
    payload = None
    if materialize:
        payload = bytearray(fill_pattern(key, 0, offset, size).tobytes())
    return StateObject(
        object_id=oid, name=name, kind=ObjectKind.RAW_BUFFER, tier=tier, file_id=file_id,
        precision=precision, size_bytes=size, payload=payload, pattern_key=key,
        pattern_offset=offset,
    )


def _run_state_value(rank_id, coords, seed, metadata_bytes, layout_echo):
    blob = fill_pattern(pattern_key(seed, f"meta/{rank_id}"), 0, 0, metadata_bytes).tobytes()
    return {
        "iteration": 0,
        "rank": rank_id,
        "coords": list(coords),
        "rng_seed": pattern_key(seed, f"rng/{rank_id}"),
        "config": dict(layout_echo),
        "lr_schedule": {"base_lr": 3.0e-4, "warmup": 2000, "step": 0},
        "blob": blob,
    }


def generate_layout(
    spec: ModelSpec,
    tp: int,
    pp: int,
    dp: int,
    zero1: bool = True,
    seed: int = 0,
    *,
    metadata_bytes: int = 2_000_000,
    host_buffer_bytes: int = 8_000,
    tensors_per_layer: int = 2,
    byte_scale: int = 1,
    write_params_all_dp: bool = False,
    materialize: bool = True,
) -> ShardLayout:
    """Shard ``spec`` over a tp x pp x dp grid.

    Sizes passed in are logical; physical payloads are ``1 / byte_scale`` of
    them (parameter counts and byte sizes are floor-divided). Per rank, files
    are: one FP16 parameter file per owned layer (written by dp_idx 0 only,
    unless ``write_params_all_dp``), one FP32 optimizer file holding master
    weights, momentum and variance, and one host metadata file with the
    structured run state and a small host-resident raw buffer.
    """
    if min(tp, pp, dp) < 1:
        raise LayoutError("tp, pp and dp must all be >= 1")
    if byte_scale < 1:
        raise LayoutError("byte_scale must be >= 1")
    if spec.layers < pp:
        raise LayoutError(f"insufficient layers: {spec.layers} layers for pp={pp}")
    n_params = spec.n_params // byte_scale
    if n_params <= 0:
        raise LayoutError("n_params vanishes at this byte_scale")
    meta_bytes = metadata_bytes // byte_scale
    host_bytes = host_buffer_bytes // byte_scale

    layer_params = split_even(n_params, spec.layers)
    stage_layers = split_even(spec.layers, pp)
    stage_start = [sum(stage_layers[:p]) for p in range(pp)]
    echo = {"tp": tp, "pp": pp, "dp": dp, "zero1": int(zero1), "seed": seed,
            "byte_scale": byte_scale}

    ranks: list[RankState] = [None] * (tp * pp * dp)  # type: ignore[list-item]
    next_id = 1
    for d in range(dp):
        for p in range(pp):
            layers = range(stage_start[p], stage_start[p] + stage_layers[p])
            for t in range(tp):
                rid = rank_index(tp, pp, t, p, d)
                coords = (t, p, d)
                objects: list[StateObject] = []
                coord_params = 0
                for layer in layers:
                    share = split_even(layer_params[layer], tp)[t]
                    coord_params += share
                    if d != 0 and not write_params_all_dp:
                        continue
                    file_id = f"layer{layer:03d}-tp{t:02d}-params"
                    for k, count in enumerate(split_even(share, tensors_per_layer)):
                        if count == 0:
                            continue
                        key = pattern_key(seed, f"param/l{layer}/tp{t}/k{k}")
                        objects.append(_raw_object(
                            next_id, f"param/l{layer}/tp{t}/k{k}", Tier.DEVICE, file_id,
                            Precision.FP16, key, 0, 2 * count, materialize))
                        next_id += 1

                if zero1:
                    shares = split_even(coord_params, dp)
                    count, first = shares[d], sum(shares[:d])
                elif d == 0:
                    count, first = coord_params, 0
                else:
                    count, first = 0, 0
                if count == 0 and (zero1 or d == 0):
                    raise LayoutError(f"zero optimizer share for rank {rid} (coords {coords})")
                if count:
                    file_id = f"optim-tp{t:02d}-pp{p:02d}-dp{d:03d}"
                    for part in ("master", "exp_avg", "exp_avg_sq"):
                        key = pattern_key(seed, f"optim/{part}/tp{t}/pp{p}")
                        objects.append(_raw_object(
                            next_id, f"optim/{part}/tp{t}/pp{p}/dp{d}", Tier.DEVICE, file_id,
                            Precision.FP32, key, 4 * first, 4 * count, materialize))
                        next_id += 1

                meta_file = f"meta-tp{t:02d}-pp{p:02d}-dp{d:03d}"
                if host_bytes > 0:
                    key = pattern_key(seed, f"host/rng/{rid}")
                    objects.append(_raw_object(
                        next_id, f"host/rng_state/{rid}", Tier.HOST, meta_file,
                        Precision.OPAQUE, key, 0, host_bytes, materialize))
                    next_id += 1
                value = _run_state_value(rid, coords, seed, meta_bytes, echo) if materialize else None
                objects.append(StateObject(
                    object_id=next_id, name=f"meta/run_state/{rid}", kind=ObjectKind.STRUCTURED,
                    tier=Tier.HOST, file_id=meta_file, payload=value))
                next_id += 1
                ranks[rid] = RankState(rid, coords, objects)

    return ShardLayout(spec=spec, tp=tp, pp=pp, dp=dp, zero1=zero1, seed=seed, ranks=ranks,
                       byte_scale=byte_scale, write_params_all_dp=write_params_all_dp)


def mutate_update_step(rank: RankState, iteration: int) -> None:
    """Apply the optimizer update for ``iteration`` in place.

    Raw payloads are overwritten with the ``(key, iteration)`` stream through a
    writable view, so any chunk views handed out earlier observe the change.
    """
    for obj in rank.objects:
        if obj.is_raw:
            if obj.payload is not None:
                view = np.frombuffer(obj.payload, dtype=np.uint8)
                view[:] = fill_pattern(obj.pattern_key, iteration, obj.pattern_offset, obj.size_bytes)
        elif isinstance(obj.payload, dict):
            obj.payload["iteration"] = iteration
            sched = obj.payload.get("lr_schedule")
            if isinstance(sched, dict):
                sched["step"] = iteration
        obj.iteration = iteration


def state_digest(ranks: Iterable[RankState]) -> str:
    """Hash of every payload; used to assert immutability across phases."""
    h = hashlib.blake2b(digest_size=16)
    for rank in ranks:
        for obj in rank.objects:
            h.update(obj.object_id.to_bytes(8, "little"))
            if obj.is_raw:
                h.update(obj.payload if obj.payload is not None else b"")
            else:
                h.update(tlv.encode(obj.payload))
    return h.hexdigest()


SUMMARY_COLUMNS = ("rank_id", "tp_idx", "pp_idx", "dp_idx", "n_objects", "raw_bytes", "structured_count")


def layout_summary(layout: ShardLayout) -> list[dict[str, int]]:
    rows = []
    for r in layout.ranks:
        t, p, d = r.coordinates
        rows.append({
            "rank_id": r.rank_id, "tp_idx": t, "pp_idx": p, "dp_idx": d,
            "n_objects": len(r.objects), "raw_bytes": r.raw_bytes,
            "structured_count": sum(1 for o in r.objects if not o.is_raw),
        })
    return rows


def layout_summary_csv(layout: ShardLayout) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=SUMMARY_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(layout_summary(layout))
    return buf.getvalue()
