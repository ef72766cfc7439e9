"""Shared builders for tests."""

from tierstream.config import SimConfig
from tierstream.engines import EngineStrategy
from tierstream.fileformat import checkpoint_dir
from tierstream.model import ModelSpec, ObjectKind, StateObject, Tier, fill_pattern, generate_layout
from tierstream.simulator import Simulation

SMALL = dict(n_params=400_000, layers=4, tp=2, pp=1, dp=1, byte_scale=100, metadata_bytes=200_000,
             t_forward=0.002, t_backward=0.004, t_update=0.001, raw_chunk_bytes=1_000_000,
             serialized_chunk_bytes=50_000, staging_capacity_bytes=10_000_000)


def small_config(**changes) -> SimConfig:
    return SimConfig(**{**SMALL, **changes})


def checkpoint_layout(root, layout, config: SimConfig, strategy: EngineStrategy, iteration: int,
                      barrier: bool = True):
    """Checkpoint after ``iteration`` and run one more iteration, so the next
    update can race the copy; returns (report, ckpt_dir)."""
    sim = Simulation(layout, config, strategy, root=root)
    sim.set_barrier(barrier)
    report = sim.run(iteration + 1, checkpoint_at=[iteration])
    return report, checkpoint_dir(root, 1)


def tiny_layout(seed=7, tp=2, pp=1, dp=1, n_params=40_000, layers=4, metadata_bytes=3_000, **kw):
    return generate_layout(ModelSpec(n_params, layers=layers), tp, pp, dp, True, seed,
                           metadata_bytes=metadata_bytes, **kw)


def mismatched_objects(ranks, iteration) -> list[int]:
    """Ids of restored raw objects whose bytes differ from the ``iteration`` state."""
    bad = []
    for rank in ranks:
        for obj in rank.objects:
            if obj.is_raw:
                want = fill_pattern(obj.pattern_key, iteration, obj.pattern_offset, obj.size_bytes)
                if bytes(obj.payload) != want.tobytes():
                    bad.append(obj.object_id)
            elif obj.payload.get("iteration") != iteration:
                bad.append(obj.object_id)
    return bad


def device_obj(oid, logical, scale, file_id="f", tier=Tier.DEVICE):
    n = logical // scale
    data = bytearray(fill_pattern(oid, 0, 0, n).tobytes())
    return StateObject(oid, f"o{oid}", ObjectKind.RAW_BUFFER, tier, file_id, size_bytes=n, payload=data)
