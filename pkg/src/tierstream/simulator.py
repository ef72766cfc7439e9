"""Training-loop simulator and benchmark drivers.

Each iteration runs forward, backward, the pre-update barrier, the update
(which mutates every payload) and, on checkpoint iterations, the checkpoint
issue. All ranks advance in lockstep on one simulated clock; a phase that
blocks some ranks holds the iteration until the slowest rank is released.
"""

from __future__ import annotations

import csv
import io
import math
import shutil
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import simpy

from . import tlv
from .cache import StagingCache
from .config import SimConfig
from .engines import (
    CheckpointEngine, EngineKind, EngineStrategy, Throughput, commit_checkpoint,
    effective_throughput,
)
from .model import (
    ModelSpec, ObjectKind, Precision, RankState, ShardLayout, StateObject, Tier, fill_pattern,
    generate_layout, mutate_update_step, pattern_key, state_digest,
)
from .transfer import (
    NS_PER_S, SimTransferEngine, ThreadedTransferEngine, Timeline, TransferConfig, seconds_to_ns,
)


class InvariantViolation(AssertionError):
    pass


class SimulationError(RuntimeError):
    def __init__(self, message: str, report: "RunReport"):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class PhaseProfile:
    t_forward: float = 0.030
    t_backward: float = 0.060
    t_update: float = 0.006

    def __post_init__(self):
        if min(self.t_forward, self.t_backward, self.t_update) < 0:
            raise ValueError("phase durations must be >= 0")

    @property
    def ns(self) -> tuple[int, int, int]:
        return (seconds_to_ns(self.t_forward), seconds_to_ns(self.t_backward),
                seconds_to_ns(self.t_update))

    @classmethod
    def from_config(cls, config: SimConfig) -> "PhaseProfile":
        return cls(config.t_forward, config.t_backward, config.t_update)


@dataclass
class IterationRecord:
    iteration: int
    t_start: int
    t_forward: int
    t_backward: int
    t_update: int
    barrier_block: int
    issue_block: int
    issue_start: int
    issue_end: int
    checkpoint_id: int
    checkpoint_bytes: int
    t_end: int

    @property
    def duration(self) -> int:
        return self.t_end - self.t_start


ITERATION_COLUMNS = ("iteration", "t_start", "t_forward", "t_backward", "t_update", "barrier_block",
                     "issue_block", "issue_start", "issue_end", "checkpoint_id", "checkpoint_bytes",
                     "t_end")


@dataclass
class CheckpointRecord:
    checkpoint_id: int
    iteration: int
    total_bytes: int
    issue_block: list[int]
    barrier_block: list[int]
    issued_at: int
    committed_at: int | None = None

    @property
    def blocked_per_rank(self) -> list[int]:
        return [a + b for a, b in zip(self.issue_block, self.barrier_block)]

    @property
    def blocked_ns(self) -> int:
        return max(self.blocked_per_rank)

    def throughput(self, floor_seconds: float | None = None) -> Throughput:
        return effective_throughput(self.total_bytes, [b / NS_PER_S for b in self.blocked_per_rank],
                                    floor_seconds)


@dataclass
class RunReport:
    engine: str
    config: dict
    iterations: list[IterationRecord] = field(default_factory=list)
    checkpoints: list[CheckpointRecord] = field(default_factory=list)
    timeline: Timeline = field(default_factory=Timeline)
    end_to_end: int = 0
    drain: int = 0
    cache_high_water: list[int] = field(default_factory=list)
    cache_final: list[int] = field(default_factory=list)
    cache_capacity: int = 0
    launch_overhead: int = 0
    error: str | None = None

    @property
    def end_to_end_s(self) -> float:
        return self.end_to_end / NS_PER_S

    @property
    def phase_total(self) -> int:
        return sum(r.t_forward + r.t_backward + r.t_update for r in self.iterations)

    @property
    def blocked_total(self) -> int:
        return sum(r.issue_block + r.barrier_block for r in self.iterations)

    @property
    def mean_iteration_s(self) -> float:
        if not self.iterations:
            return 0.0
        return sum(r.duration for r in self.iterations) / len(self.iterations) / NS_PER_S

    def throughputs(self) -> list[Throughput]:
        floor = self.launch_overhead / NS_PER_S or None
        return [c.throughput(floor) for c in self.checkpoints]

    def check_accounting(self) -> None:
        lhs = self.end_to_end - self.phase_total
        rhs = self.blocked_total + self.drain
        if lhs != rhs:
            raise InvariantViolation(f"accounting identity broken: {lhs} != {rhs}")

    def iterations_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(ITERATION_COLUMNS)
        for r in self.iterations:
            writer.writerow([getattr(r, c) for c in ITERATION_COLUMNS])
        return buf.getvalue()

    def checkpoints_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["checkpoint_id", "iteration", "total_bytes", "blocked_ns",
                         "issued_at", "committed_at", "effective_throughput"])
        for c, tp in zip(self.checkpoints, self.throughputs()):
            writer.writerow([c.checkpoint_id, c.iteration, c.total_bytes, c.blocked_ns,
                             c.issued_at, c.committed_at, _fmt_rate(tp.value)])
        return buf.getvalue()

    def summary_value(self) -> dict:
        tps = self.throughputs()
        finite = [t.value for t in tps if not t.unbounded]
        return {
            "engine": self.engine,
            "iterations": len(self.iterations),
            "checkpoints": len(self.checkpoints),
            "end_to_end_s": self.end_to_end_s,
            "phase_total_s": self.phase_total / NS_PER_S,
            "blocked_total_s": self.blocked_total / NS_PER_S,
            "drain_s": self.drain / NS_PER_S,
            "mean_iteration_s": self.mean_iteration_s,
            "checkpoint_bytes": sum(c.total_bytes for c in self.checkpoints),
            "mean_effective_throughput": (sum(finite) / len(finite)) if finite else None,
            "unbounded_throughput_checkpoints": sum(1 for t in tps if t.unbounded),
            "cache_capacity": self.cache_capacity,
            "cache_high_water": max(self.cache_high_water, default=0),
            "error": self.error,
            "config": self.config,
        }

    def summary_text(self) -> str:
        return tlv.dump_text(self.summary_value())

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "iterations.csv").write_text(self.iterations_csv())
        (out / "checkpoints.csv").write_text(self.checkpoints_csv())
        (out / "timeline.csv").write_text(self.timeline.to_csv())
        (out / "summary.txt").write_text(self.summary_text() + "\n")


def _fmt_rate(value: float) -> str:
    return "inf" if math.isinf(value) else f"{value:.6g}"


def transfer_config(config: SimConfig) -> TransferConfig:
    return TransferConfig(
        d2h_bandwidth=config.d2h_bandwidth,
        host_copy_bandwidth=config.host_copy_bandwidth,
        flush_bandwidth=config.flush_bandwidth,
        flush_workers=config.flush_workers,
        serialize_bandwidth=config.serialize_bandwidth,
        byte_scale=config.byte_scale,
        raw_chunk_bytes=config.raw_chunk_bytes,
        serialized_chunk_bytes=config.serialized_chunk_bytes,
        alignment=config.alignment,
        host_inplace=config.host_inplace,
        cache_timeout_ns=seconds_to_ns(config.cache_timeout) if config.cache_timeout > 0 else None,
    )


def layout_from_config(config: SimConfig, materialize: bool = True) -> ShardLayout:
    spec = ModelSpec(n_params=config.n_params, layers=config.layers, hidden_dim=config.hidden_dim)
    return generate_layout(
        spec, config.tp, config.pp, config.dp, config.zero1, config.seed,
        metadata_bytes=config.metadata_bytes, host_buffer_bytes=config.host_buffer_bytes,
        byte_scale=config.byte_scale, write_params_all_dp=config.write_params_all_dp,
        materialize=materialize,
    )


def strategy_from_config(config: SimConfig) -> EngineStrategy:
    return EngineStrategy.parse(config.engine, config.lazy_serialize_overlap)


def layout_echo(layout: ShardLayout) -> dict:
    return {"tp": layout.tp, "pp": layout.pp, "dp": layout.dp, "zero1": int(layout.zero1),
            "seed": layout.seed, "byte_scale": layout.byte_scale, "n_params": layout.spec.n_params}


class Simulation:
    """One simulated training job: ranks, engines and the shared clock."""

    def __init__(self, layout: ShardLayout, config: SimConfig, strategy: EngineStrategy | None = None,
                 root=None, check_immutability: bool = True):
        self.layout = layout
        self.config = config
        self.strategy = strategy or strategy_from_config(config)
        self.check_immutability = check_immutability
        self._tmp = None
        if root is None:
            self._tmp = tempfile.mkdtemp(prefix="tierstream-")
            root = self._tmp
        self.root = Path(root)
        self.env = simpy.Environment()
        self.timeline = Timeline()
        self.tcfg = transfer_config(config)
        scale = layout.byte_scale
        if self.tcfg.byte_scale != scale:
            self.tcfg.byte_scale = scale
        capacity = max(1, config.staging_capacity_bytes // scale)
        clock = lambda: self.env.now  # noqa: E731
        shared = StagingCache(capacity, clock=clock) if config.shared_cache else None
        self.caches = [shared or StagingCache(capacity, clock=clock) for _ in layout.ranks]
        node = (simpy.Resource(self.env, capacity=config.node_flush_streams)
                if config.node_flush_streams > 0 else None)
        self.transfers = [SimTransferEngine(self.env, r.rank_id, self.caches[i], self.tcfg,
                                            self.timeline, node)
                          for i, r in enumerate(layout.ranks)]
        self.launch_ns = seconds_to_ns(config.launch_overhead)
        self.engines = [CheckpointEngine(self.env, r, self.strategy, self.transfers[i], self.root,
                                         self.launch_ns)
                        for i, r in enumerate(layout.ranks)]
        self.commits: list[simpy.Process] = []

    def set_barrier(self, enabled: bool) -> None:
        for e in self.engines:
            e.barrier_enabled = enabled

    def cleanup(self) -> None:
        if self._tmp is not None:
            shutil.rmtree(self._tmp, ignore_errors=True)
            self._tmp = None

    def _all(self, gens: Iterable):
        procs = [self.env.process(g) for g in gens]
        yield simpy.AllOf(self.env, procs)
        return [p.value for p in procs]

    def _driver(self, report: RunReport, profile: PhaseProfile, n_iters: int, ckpt_at):
        env = self.env
        fwd, bwd, upd = profile.ns
        ranks = self.layout.ranks
        next_id = 1
        for it in range(1, n_iters + 1):
            start = env.now
            digest = state_digest(ranks) if self.check_immutability else None
            yield env.timeout(fwd)
            yield env.timeout(bwd)
            if digest is not None and state_digest(ranks) != digest:
                raise InvariantViolation(f"state mutated during forward/backward of iteration {it}")
            t_b = env.now
            barrier = yield from self._all(e.pre_update_barrier() for e in self.engines)
            barrier_block = env.now - t_b
            if report.checkpoints and report.checkpoints[-1].iteration == it - 1:
                report.checkpoints[-1].barrier_block = list(barrier)
            for rank in ranks:
                mutate_update_step(rank, it)
            yield env.timeout(upd)
            issue_start = env.now
            cid, nbytes, issue_block = -1, 0, 0
            if ckpt_at(it):
                cid = next_id
                next_id += 1
                issued = yield from self._all(e.issue_checkpoint(cid, it) for e in self.engines)
                issue_block = env.now - issue_start
                jobs = [e.last_job for e in self.engines]
                record = CheckpointRecord(cid, it, 0, list(issued), [0] * len(issued), issue_start)
                report.checkpoints.append(record)
                self.commits.append(env.process(self._commit(jobs, record)))
            report.iterations.append(IterationRecord(
                it, start, fwd, bwd, upd, barrier_block, issue_block, issue_start, env.now, cid,
                nbytes, env.now))
        loop_end = env.now
        for e in self.engines:
            yield from e.drain()
        if self.commits:
            yield simpy.AllOf(env, self.commits)
        report.drain = env.now - loop_end
        report.end_to_end = env.now

    def _commit(self, jobs, record: CheckpointRecord):
        def on_commit(_cid, now):
            record.committed_at = now
        yield from commit_checkpoint(self.env, jobs, self.transfers, layout_echo(self.layout),
                                     self.root, on_commit)
        record.total_bytes = sum(j.logical_bytes(self.layout.byte_scale) for j in jobs)

    def run(self, n_iters: int, ckpt_interval: int = 1, profile: PhaseProfile | None = None,
            checkpoint_at: Iterable[int] | None = None) -> RunReport:
        if n_iters < 1:
            raise ValueError("n_iters must be >= 1")
        if ckpt_interval < 1:
            raise ValueError("ckpt_interval must be >= 1")
        profile = profile or PhaseProfile.from_config(self.config)
        if checkpoint_at is not None:
            wanted = set(checkpoint_at)
            ckpt_at = wanted.__contains__
        else:
            ckpt_at = lambda it: it % ckpt_interval == 0  # noqa: E731
        report = RunReport(engine=self.strategy.label, config=self.config.to_value(),
                           timeline=self.timeline, launch_overhead=self.launch_ns)
        report.config.pop("output_dir", None)
        driver = self.env.process(self._driver(report, profile, n_iters, ckpt_at))
        try:
            self.env.run(until=driver)
        except Exception as exc:
            report.error = f"{type(exc).__name__}: {exc}"
            self._finish(report)
            raise SimulationError(str(exc), report) from exc
        self._finish(report)
        by_id = {c.checkpoint_id: c for c in report.checkpoints}
        for rec in report.iterations:
            if rec.checkpoint_id in by_id:
                rec.checkpoint_bytes = by_id[rec.checkpoint_id].total_bytes
        return report

    def _finish(self, report: RunReport) -> None:
        caches = list({id(c): c for c in self.caches}.values())
        report.cache_capacity = caches[0].capacity_bytes * self.layout.byte_scale
        report.cache_high_water = [c.high_water * self.layout.byte_scale for c in caches]
        report.cache_final = [c.allocated_bytes * self.layout.byte_scale for c in caches]


def run(layout: ShardLayout, profile: PhaseProfile, strategy: EngineStrategy, n_iters: int,
        ckpt_interval: int, config: SimConfig | None = None, root=None) -> RunReport:
    """Simulate ``n_iters`` iterations, checkpointing every ``ckpt_interval``."""
    config = config or SimConfig(byte_scale=layout.byte_scale)
    sim = Simulation(layout, config, strategy, root)
    try:
        return sim.run(n_iters, ckpt_interval, profile)
    finally:
        sim.cleanup()


def checkpoint_once(config: SimConfig, strategy: EngineStrategy | None = None, root=None) -> RunReport:
    """One checkpoint after iteration 1, then one more iteration so the
    pre-update barrier it causes is charged to it."""
    layout = layout_from_config(config)
    sim = Simulation(layout, config, strategy, root)
    try:
        return sim.run(2, checkpoint_at=[1])
    finally:
        sim.cleanup()


@dataclass
class DpSweepRow:
    dp: int
    n_ranks: int
    total_bytes: int
    mean_rank_bytes: float
    optim_bytes: dict[tuple[int, int, int], int]
    param_bytes_total: int
    metadata_bytes_total: int
    max_blocked_ns: int
    report: RunReport | None = None


def dp_sweep(spec: ModelSpec, tp: int, pp: int, dp_list: Sequence[int], strategy: EngineStrategy,
             config: SimConfig | None = None, n_iters: int = 1, simulate: bool = True) -> list[DpSweepRow]:
    """Repeat a run for each data-parallel degree with ZeRO-1 layouts."""
    if not dp_list:
        raise ValueError("dp_list must be nonempty")
    config = config or SimConfig()
    rows = []
    for dp in dp_list:
        cfg = config.replace(n_params=spec.n_params, layers=spec.layers, hidden_dim=spec.hidden_dim,
                             tp=tp, pp=pp, dp=dp, zero1=True, n_iters=n_iters)
        layout = layout_from_config(cfg, materialize=simulate)
        scale = layout.byte_scale
        optim = {r.coordinates: r.category_bytes()["optim"] * scale for r in layout.ranks}
        params = sum(r.category_bytes()["param"] for r in layout.ranks) * scale
        host = sum(r.category_bytes()["host"] for r in layout.ranks) * scale
        report = None
        blocked = 0
        if simulate:
            report = run(layout, PhaseProfile.from_config(cfg), strategy, n_iters, cfg.ckpt_interval, cfg)
            blocked = max((c.blocked_ns for c in report.checkpoints), default=0)
            meta = sum(c.total_bytes for c in report.checkpoints[:1]) - (sum(optim.values()) + params + host)
        else:
            meta = 0
        total = sum(optim.values()) + params + host + meta
        rows.append(DpSweepRow(dp, len(layout.ranks), total, total / len(layout.ranks), optim,
                               params, host + meta, blocked, report))
    return rows


@dataclass
class MicrobenchRow:
    size: int
    staged: float
    ideal: float
    staged_per_rank: float
    ideal_per_rank: float


class StorageUnavailable(OSError):
    pass


def _bench_ranks(n_ranks: int, physical: int, tier: Tier, seed: int = 0) -> list[RankState]:
    ranks = []
    for r in range(n_ranks):
        key = pattern_key(seed, f"bench/{r}")
        obj = StateObject(object_id=r + 1, name=f"bench/{r}", kind=ObjectKind.RAW_BUFFER, tier=tier,
                          file_id=f"bench-r{r:02d}", precision=Precision.FP16, size_bytes=physical,
                          payload=bytearray(fill_pattern(key, 0, 0, physical).tobytes()),
                          pattern_key=key)
        ranks.append(RankState(r, (r, 0, 0), [obj]))
    return ranks


def _bench_sim(ranks, tcfg: TransferConfig, capacity: int, strategy: EngineStrategy, root,
               launch_ns: int) -> int:
    env = simpy.Environment()
    timeline = Timeline()
    transfers = [SimTransferEngine(env, r.rank_id, StagingCache(capacity, clock=lambda: env.now),
                                   tcfg, timeline) for r in ranks]
    engines = [CheckpointEngine(env, r, strategy, t, root, launch_ns) for r, t in zip(ranks, transfers)]

    def one(engine):
        yield from engine.issue_checkpoint(1, 0)
        yield from engine.drain()

    procs = [env.process(one(e)) for e in engines]
    env.run(until=simpy.AllOf(env, procs))
    return env.now


def microbench_flush(data_sizes: Sequence[int], strategy: EngineStrategy = EngineStrategy(EngineKind.LAZY),
                     mode: str = "SIMULATED", config: SimConfig | None = None, n_ranks: int = 4,
                     root=None) -> list[MicrobenchRow]:
    """Flush one raw object per rank at each size; node throughput vs size.

    ``staged`` objects start on the device and go through the staging cache;
    the ``ideal`` series starts on the host and is flushed in place. In
    SIMULATED mode sizes are logical and time comes from the simulated clock;
    in WALL mode sizes are real bytes and time is measured wall time.
    """
    config = config or SimConfig()
    mode = mode.upper()
    if mode not in ("SIMULATED", "WALL"):
        raise ValueError(f"unknown mode {mode}")
    if any(s <= 0 for s in data_sizes):
        raise ValueError("sizes must be positive")
    own_tmp = root is None
    base = Path(tempfile.mkdtemp(prefix="tierstream-bench-") if own_tmp else root)
    try:
        base.mkdir(parents=True, exist_ok=True)
        probe = base / ".probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise StorageUnavailable(f"storage at {base} is unavailable: {exc}") from exc
    rows = []
    try:
        for i, size in enumerate(data_sizes):
            results = []
            for tier, inplace in ((Tier.DEVICE, False), (Tier.HOST, True)):
                out = base / f"size{i:02d}-{tier.value}"
                if mode == "SIMULATED":
                    tcfg = transfer_config(config.replace(host_inplace=inplace))
                    physical = max(1, size // tcfg.byte_scale)
                    ranks = _bench_ranks(n_ranks, physical, tier, config.seed)
                    capacity = max(1, config.staging_capacity_bytes // tcfg.byte_scale)
                    elapsed = _bench_sim(ranks, tcfg, capacity, strategy, out,
                                         seconds_to_ns(config.launch_overhead)) / NS_PER_S
                    moved = physical * tcfg.byte_scale
                else:
                    tcfg = transfer_config(config.replace(host_inplace=inplace, byte_scale=1))
                    ranks = _bench_ranks(n_ranks, size, tier, config.seed)
                    elapsed = _bench_wall(ranks, tcfg, config.staging_capacity_bytes, out)
                    moved = size
                shutil.rmtree(out, ignore_errors=True)
                results.append(moved / elapsed if elapsed > 0 else math.inf)
            staged, ideal = results
            rows.append(MicrobenchRow(size, staged * n_ranks, ideal * n_ranks, staged, ideal))
    finally:
        if own_tmp:
            shutil.rmtree(base, ignore_errors=True)
    return rows


def _bench_wall(ranks, tcfg: TransferConfig, capacity: int, root) -> float:
    engines = [ThreadedTransferEngine(r.rank_id, StagingCache(max(capacity, 1), record_samples=False), tcfg)
               for r in ranks]
    start = time.perf_counter()
    try:
        jobs = [e.checkpoint(r, 1, 0, Path(root) / "ckpt-000001") for e, r in zip(engines, ranks)]
        for e, j in zip(engines, jobs):
            e.wait_persisted(j.ticket, timeout=600)
    except OSError as exc:
        raise StorageUnavailable(str(exc)) from exc
    finally:
        for e in engines:
            e.shutdown()
    # per-rank throughput: all ranks ran concurrently for this long
    return time.perf_counter() - start


MICROBENCH_COLUMNS = ("size", "staged", "ideal", "staged_per_rank", "ideal_per_rank")


def microbench_csv(rows: Sequence[MicrobenchRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MICROBENCH_COLUMNS)
    for r in rows:
        writer.writerow([r.size] + [_fmt_rate(getattr(r, c)) for c in MICROBENCH_COLUMNS[1:]])
    return buf.getvalue()


def dp_sweep_csv(rows: Sequence[DpSweepRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["dp", "n_ranks", "total_bytes", "mean_rank_bytes", "optim_bytes_per_rank",
                     "param_bytes_total", "metadata_bytes_total", "max_blocked_ns"])
    for r in rows:
        optim = sorted(set(r.optim_bytes.values()))
        writer.writerow([r.dp, r.n_ranks, r.total_bytes, f"{r.mean_rank_bytes:.1f}",
                         "/".join(str(v) for v in optim), r.param_bytes_total,
                         r.metadata_bytes_total, r.max_blocked_ns])
    return buf.getvalue()
