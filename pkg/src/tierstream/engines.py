"""Checkpoint strategies: synchronous, two-phase and lazy.

All three drive the same transfer engine and produce identical files; they
differ only in how long the training thread is held at issue time and before
the update phase.

    SYNC       launch, serialize, stage + flush; return once persisted
    TWO_PHASE  launch, serialize, stage; return once the host snapshot exists
    LAZY       launch and return; the next update waits for the snapshot

With ``lazy_serialize_overlap`` off, LAZY serializes structured objects at
issue time instead of on the background serializer.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import simpy

from .fileformat import CheckpointManifest, checkpoint_dir, write_manifest
from .model import RankState
from .transfer import CheckpointJob, NS_PER_S, Op, SimTransferEngine


class EngineKind(str, enum.Enum):
    SYNC = "sync"
    TWO_PHASE = "two_phase"
    LAZY = "lazy"


@dataclass(frozen=True)
class EngineStrategy:
    kind: EngineKind
    lazy_serialize_overlap: bool = True

    @classmethod
    def parse(cls, name: str, lazy_serialize_overlap: bool = True) -> "EngineStrategy":
        try:
            kind = EngineKind(name.strip().lower().replace("-", "_"))
        except ValueError:
            raise ValueError(f"unknown engine {name!r} (expected sync, two_phase or lazy)") from None
        return cls(kind, lazy_serialize_overlap)

    @property
    def background_serialize(self) -> bool:
        return self.kind is EngineKind.LAZY and self.lazy_serialize_overlap

    @property
    def label(self) -> str:
        if self.kind is EngineKind.LAZY and not self.lazy_serialize_overlap:
            return "lazy-old"
        return self.kind.value


SYNC = EngineStrategy(EngineKind.SYNC)
TWO_PHASE = EngineStrategy(EngineKind.TWO_PHASE)
LAZY = EngineStrategy(EngineKind.LAZY)
LAZY_OLD = EngineStrategy(EngineKind.LAZY, lazy_serialize_overlap=False)


class CheckpointEngine:
    """One rank's checkpoint strategy on the simulated clock.

    ``issue_checkpoint`` and ``pre_update_barrier`` are generators meant to be
    run from the rank's training process; each returns the nanoseconds the
    training thread was blocked.
    """

    def __init__(self, env: simpy.Environment, rank: RankState, strategy: EngineStrategy,
                 transfer: SimTransferEngine, root, launch_overhead_ns: int = 10_000_000):
        self.env = env
        self.rank = rank
        self.strategy = strategy
        self.transfer = transfer
        self.root = Path(root)
        self.launch_overhead_ns = launch_overhead_ns
        # test hook: switching it off lets the update race the device copies
        self.barrier_enabled = True
        self.last_job: CheckpointJob | None = None
        self.jobs: list[CheckpointJob] = []

    def issue_checkpoint(self, checkpoint_id: int, iteration: int):
        t0 = self.env.now
        kind = self.strategy.kind
        prior = self.last_job
        if kind is EngineKind.LAZY and prior is not None and not prior.ticket.snapshot_complete:
            # a single consistent device view: the previous copy-out must finish first
            yield from self.transfer.wait_snapshot(prior.ticket)
        yield self.env.timeout(self.launch_overhead_ns)
        job = self.transfer.prepare(self.rank, checkpoint_id, iteration,
                                    checkpoint_dir(self.root, checkpoint_id))
        self.last_job = job
        self.jobs.append(job)
        if not self.strategy.background_serialize:
            yield from self.transfer.serialize_inline(job)
        self.transfer.submit(job, background_serialize=self.strategy.background_serialize)
        if kind is EngineKind.TWO_PHASE:
            yield from self.transfer.wait_snapshot(job.ticket)
        elif kind is EngineKind.SYNC:
            yield from self.transfer.wait_persisted(job.ticket)
        job.ticket.raise_if_failed()
        return self.env.now - t0

    def pre_update_barrier(self):
        if self.strategy.kind is not EngineKind.LAZY or not self.barrier_enabled:
            return 0
        job = self.last_job
        if job is None:
            return 0
        t0 = self.env.now
        blocked = yield from self.transfer.wait_snapshot(job.ticket)
        self.transfer.timeline.add(job.checkpoint_id, self.rank.rank_id, 0, Op.BARRIER,
                                   t0, self.env.now, 0)
        return blocked

    def drain(self):
        """Wait for every issued checkpoint of this rank to persist."""
        t0 = self.env.now
        for job in self.jobs:
            yield from self.transfer.wait_persisted(job.ticket)
        return self.env.now - t0


def commit_checkpoint(env: simpy.Environment, jobs: Sequence[CheckpointJob], transfers,
                      layout_echo: dict, root, on_commit=None):
    """Process: once every rank's files carry footers, write the manifest."""
    for job, transfer in zip(jobs, transfers):
        yield from transfer.wait_persisted(job.ticket)
    first = jobs[0]
    manifest = CheckpointManifest.for_ranks(first.checkpoint_id, first.iteration, layout_echo,
                                            [j.rank for j in jobs])
    manifest.complete = True
    path = write_manifest(checkpoint_dir(root, first.checkpoint_id), manifest)
    if on_commit is not None:
        on_commit(first.checkpoint_id, env.now)
    return path


@dataclass(frozen=True)
class Throughput:
    total_bytes: int
    blocked_seconds: float
    value: float
    floor_value: float | None = None

    @property
    def unbounded(self) -> bool:
        return math.isinf(self.value)


def effective_throughput(total_bytes: int, blocked, floor_seconds: float | None = None) -> Throughput:
    """Checkpoint bytes over the time training was held.

    ``blocked`` is seconds, or per-rank seconds, in which case the slowest rank
    decides. Zero blocked time gives an infinite value, plus the value at
    ``floor_seconds`` when one is supplied.
    """
    if isinstance(blocked, (list, tuple)):
        if not blocked:
            raise ValueError("no per-rank blocked times")
        blocked = max(blocked)
    if blocked < 0:
        raise ValueError("blocked time cannot be negative")
    if blocked == 0:
        floor = total_bytes / floor_seconds if floor_seconds else None
        return Throughput(total_bytes, 0.0, math.inf, floor)
    return Throughput(total_bytes, float(blocked), total_bytes / blocked)


def ns_to_s(ns: int) -> float:
    return ns / NS_PER_S
