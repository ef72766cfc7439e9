"""Multi-tier asynchronous checkpointing with a deterministic training-loop simulator."""

from .cache import StagingCache
from .config import SimConfig, load_config
from .engines import (
    LAZY, LAZY_OLD, SYNC, TWO_PHASE, CheckpointEngine, EngineKind, EngineStrategy,
    effective_throughput,
)
from .fileformat import read_footer, read_manifest, restore, verify_file
from .model import (
    ModelSpec, ObjectKind, RankState, ShardLayout, StateObject, Tier, estimate_checkpoint_bytes,
    generate_layout, mutate_update_step,
)
from .providers import next_chunk, plan_layout, serialize_structured, serialized_fraction
from .simulator import PhaseProfile, RunReport, Simulation, checkpoint_once, dp_sweep, microbench_flush, run

__version__ = "0.1.0"

__all__ = [
    "StagingCache",
    "SimConfig",
    "load_config",
    "LAZY",
    "LAZY_OLD",
    "SYNC",
    "TWO_PHASE",
    "CheckpointEngine",
    "EngineKind",
    "EngineStrategy",
    "effective_throughput",
    "read_footer",
    "read_manifest",
    "restore",
    "verify_file",
    "ModelSpec",
    "ObjectKind",
    "RankState",
    "ShardLayout",
    "StateObject",
    "Tier",
    "estimate_checkpoint_bytes",
    "generate_layout",
    "mutate_update_step",
    "next_chunk",
    "plan_layout",
    "serialize_structured",
    "serialized_fraction",
    "PhaseProfile",
    "RunReport",
    "Simulation",
    "checkpoint_once",
    "dp_sweep",
    "microbench_flush",
    "run",
]
