import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tierstream import tlv
from tierstream.model import ModelSpec, ObjectKind, StateObject, Tier, generate_layout
from tierstream.providers import (
    END, ChunkTrace, CompositeProvider, PlacementMode, PlanError, ProviderKind, RawProvider,
    SerializingProvider, StreamError, TraceRecord, build_provider, next_chunk, plan_layout,
    serialize_structured, serialized_fraction,
)

import oracles


def raw(oid, size, file_id="f", payload=True, tier=Tier.DEVICE):
    data = bytearray(np.random.default_rng(oid).integers(0, 256, size, dtype=np.uint8).tobytes()) \
        if payload else None
    return StateObject(oid, f"raw{oid}", ObjectKind.RAW_BUFFER, tier, file_id, size_bytes=size, payload=data)


def structured(oid, value, file_id="f"):
    return StateObject(oid, f"s{oid}", ObjectKind.STRUCTURED, Tier.HOST, file_id, payload=value)


def drain(provider, inline=True):
    out = []
    while True:
        chunk = next_chunk(provider, inline=inline, timeout=5)
        if chunk is END:
            return out
        out.append(chunk)


def address(view) -> int:
    return np.frombuffer(view, dtype=np.uint8).__array_interface__["data"][0]


# layout planning ---------------------------------------------------------------------

def test_plan_descending_size_and_aligned():
    objs = [raw(1, 4096, payload=False), raw(2, 3_500_000_000, payload=False),
            raw(3, 1_000_000_000, payload=False)]
    plan = plan_layout(objs, alignment=4096).files["f"]
    first = 4096
    second = -(-(first + 3_500_000_000) // 4096) * 4096
    third = -(-(second + 1_000_000_000) // 4096) * 4096
    assert plan.fixed_assignments == {2: (first, 3_500_000_000), 3: (second, 1_000_000_000),
                                      1: (third, 4096)}
    assert plan.tensor_region_end == third + 4096
    spans = [(o, o + n) for o, n in plan.fixed_assignments.values()]
    assert not oracles.any_pairwise_overlap(spans)


def test_plan_single_and_empty():
    plan = plan_layout([raw(1, 4096, payload=False)]).files["f"]
    assert plan.fixed_assignments == {1: (4096, 4096)} and plan.tensor_region_end == 8192
    only_structured = plan_layout([structured(1, {})]).files["f"]
    assert only_structured.fixed_assignments == {}
    assert only_structured.tensor_region_end == 4096 == only_structured.append_region_start
    assert only_structured.appended == [1]
    assert plan_layout([]).files == {}


def test_plan_rejects_duplicate_ids():
    with pytest.raises(PlanError, match="duplicate"):
        plan_layout([raw(1, 10, payload=False), raw(1, 20, "g", payload=False)])


@settings(max_examples=60)
@given(st.lists(st.integers(1, 20_000), max_size=12), st.sampled_from([1, 8, 512, 4096]))
def test_plan_tiles_the_tensor_region(sizes, alignment):
    objs = [raw(i + 1, s, payload=False) for i, s in enumerate(sizes)]
    plan = plan_layout(objs, alignment).files.get("f")
    if plan is None:
        assert not sizes
        return
    assert plan == plan_layout(objs, alignment).files["f"]
    spans = sorted((o, o + n) for o, n in plan.fixed_assignments.values())
    cursor = plan.header_reserved
    for start, end in spans:
        assert start % alignment == 0
        assert 0 <= start - cursor < alignment
        cursor = end
    assert cursor == plan.tensor_region_end
    order = [oid for oid, _ in sorted(plan.fixed_assignments.items(), key=lambda kv: kv[1][0])]
    assert [objs[i - 1].size_bytes for i in order] == sorted(sizes, reverse=True)


# chunk streams --------------------------------------------------------------------

def test_raw_chunks_come_first_in_composite():
    big = raw(1, 64_000_000)
    meta = structured(2, {"iteration": 1, "blob": b"x" * 2_500_000})
    objs = [big, meta]
    plan = plan_layout(objs)
    provider = CompositeProvider([RawProvider(objs, plan, 16_000_000), SerializingProvider(objs, 1_000_000)])
    chunks = drain(provider)
    assert [c.serialized for c in chunks[:4]] == [False] * 4
    assert all(c.length == 16_000_000 for c in chunks[:4])
    assert all(c.serialized for c in chunks[4:]) and len(chunks) == 7
    assert [c.object_offset for c in chunks[:4]] == [0, 16_000_000, 32_000_000, 48_000_000]


def test_tiny_object_is_one_chunk():
    obj = raw(1, 10)
    chunks = drain(RawProvider([obj], plan_layout([obj])))
    assert len(chunks) == 1 and chunks[0].length == 10
    assert chunks[0].placement.mode is PlacementMode.FIXED and chunks[0].placement.file_offset == 4096


def test_empty_composite_ends_immediately():
    assert next_chunk(CompositeProvider([])) is END


def test_raw_chunks_alias_the_payload():
    obj = raw(1, 100_000)
    base = address(memoryview(obj.payload))
    for chunk in drain(RawProvider([obj], plan_layout([obj]), 7_000)):
        start = address(chunk.data_ref)
        assert base <= start and start + chunk.length <= base + obj.size_bytes
        assert start - base == chunk.object_offset


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 5000), min_size=0, max_size=6),
       st.lists(st.binary(max_size=3000), min_size=0, max_size=3),
       st.integers(1, 1500), st.integers(1, 700))
def test_stream_reconstructs_every_object(raw_sizes, blobs, raw_chunk, ser_chunk):
    objs = [raw(i + 1, s, file_id=f"f{i % 2}") for i, s in enumerate(raw_sizes)]
    n = len(objs)
    objs += [structured(n + j + 1, {"j": j, "blob": b}, file_id=f"f{j % 2}") for j, b in enumerate(blobs)]
    provider = build_provider(objs, plan_layout(objs), raw_chunk, ser_chunk)
    chunks = drain(provider)
    rebuilt, last_offset = {}, {}
    fixed = []
    for c in chunks:
        limit = ser_chunk if c.serialized else raw_chunk
        assert 0 < c.length <= limit
        assert c.object_offset > last_offset.get(c.object_id, -1)
        last_offset[c.object_id] = c.object_offset
        rebuilt.setdefault(c.object_id, bytearray()).extend(c.data_ref)
        if c.placement.mode is PlacementMode.FIXED:
            fixed.append((c.placement.file_id, c.placement.file_offset, c.placement.file_offset + c.length))
    for o in objs:
        want = bytes(o.payload) if o.is_raw else tlv.encode(o.payload)
        assert bytes(rebuilt[o.object_id]) == want
    for fid in {f for f, _, _ in fixed}:
        assert not oracles.any_pairwise_overlap([(s, e) for f, s, e in fixed if f == fid])
    # raw chunks are always ready, so none may follow a serialized one
    kinds = [c.serialized for c in chunks]
    assert kinds == sorted(kinds)


def test_policy_hook_can_reorder():
    objs = [raw(1, 100), structured(2, {"a": 1})]
    plan = plan_layout(objs)
    serialized_first = lambda leaves: sorted(leaves, key=lambda p: p.kind is ProviderKind.RAW)
    ser = SerializingProvider(objs)
    provider = CompositeProvider([RawProvider(objs, plan), ser], serialized_first)
    ser.run()  # ready before the first pull, so the policy decides
    assert [c.serialized for c in drain(provider)] == [True, False]


def test_background_serializer_feeds_blocking_consumer():
    objs = [raw(1, 50_000), structured(2, {"blob": b"z" * 10_000}), structured(3, [1, 2, 3])]
    provider = build_provider(objs, plan_layout(objs), 8_000, 1_000)
    workers = [threading.Thread(target=leaf.run) for leaf in provider.leaves()
               if leaf.kind is ProviderKind.SERIALIZING]
    for w in workers:
        w.start()
    chunks = drain(provider, inline=False)
    for w in workers:
        w.join()
    assert sum(c.length for c in chunks) == 50_000 + len(tlv.encode({"blob": b"z" * 10_000})) \
        + len(tlv.encode([1, 2, 3]))


def test_serialization_failure_surfaces_object_id():
    objs = [structured(5, {"ok": 1, "bad": {"inner": object()}})]
    provider = build_provider(objs, plan_layout(objs))
    with pytest.raises(StreamError) as err:
        drain(provider)
    assert err.value.object_id == 5
    assert "bad.inner" in str(err.value)


# serialization ----------------------------------------------------------------------

def test_serialize_round_trip_and_size():
    obj = structured(1, {"iteration": 7, "rng_seed": 42})
    chunks = []
    total = serialize_structured(obj, chunks.append)
    data = b"".join(bytes(c.data_ref) for c in chunks)
    assert tlv.decode(data) == {"iteration": 7, "rng_seed": 42}
    assert obj.size_bytes == total == len(data)
    assert all(c.placement.mode is PlacementMode.APPEND for c in chunks)


def test_serialize_empty_map():
    obj = structured(1, {})
    chunks = []
    assert serialize_structured(obj, chunks.append) == 9
    assert tlv.decode(bytes(chunks[0].data_ref)) == {}


def test_serialize_large_nested_value_in_bounded_chunks():
    value = {"a": {"b": {"c": b"\x5a" * 1_000_000}}, "n": 1}
    obj = structured(1, value)
    chunks = []
    total = serialize_structured(obj, chunks.append, 1_000_000)
    assert len(chunks) == 2
    assert all(c.length <= 1_000_000 for c in chunks)
    assert total == sum(c.length for c in chunks) == len(tlv.encode(value))


def test_serialize_rejects_raw_objects():
    with pytest.raises(TypeError):
        serialize_structured(raw(1, 10), lambda c: None)


def test_serialized_fraction_examples():
    heavy_rank = ChunkTrace([TraceRecord(1, 95_000_000_000, False), TraceRecord(2, 40_000_000, True)])
    assert serialized_fraction(heavy_rank) == pytest.approx(40e6 / 95.04e9)
    assert serialized_fraction(heavy_rank) == pytest.approx(4.2e-4, rel=0.01)
    assert serialized_fraction(ChunkTrace([TraceRecord(1, 10, True)])) == 1.0
    assert serialized_fraction(ChunkTrace([TraceRecord(1, 10, False)])) == 0.0
    with pytest.raises(ValueError):
        serialized_fraction(ChunkTrace())


def test_generated_rank_stream_is_mostly_raw():
    layout = generate_layout(ModelSpec(64_000_000, layers=8), 4, 1, 1, byte_scale=1000)
    rank = layout.ranks[0]
    provider = build_provider(rank.objects, plan_layout(rank.objects), 16_000, 1_000)
    trace = ChunkTrace()
    for chunk in drain(provider):
        trace.record(chunk)
    assert 0 < serialized_fraction(trace) < 0.02
