"""Command-line entry point: ``tierstream <command> ...``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import SimConfig, load_config
from .fileformat import CheckpointError, read_footer, verify_checkpoint
from .model import ModelSpec, layout_summary_csv
from .simulator import (
    InvariantViolation, Simulation, SimulationError, dp_sweep, dp_sweep_csv, layout_from_config,
    microbench_csv, microbench_flush, strategy_from_config,
)

KIND_NAMES = {0: "raw", 1: "structured", 2: "header"}


def _config(args) -> SimConfig:
    cfg = load_config(args.config) if args.config else SimConfig()
    changes = {}
    if getattr(args, "engine", None):
        changes["engine"] = args.engine
    if getattr(args, "no_overlap", False):
        changes["lazy_serialize_overlap"] = False
    if getattr(args, "n_iters", None):
        changes["n_iters"] = args.n_iters
    if getattr(args, "interval", None):
        changes["ckpt_interval"] = args.interval
    return cfg.replace(**changes) if changes else cfg


def _numbers(text: str) -> list[int]:
    return [int(float(x)) for x in text.split(",") if x.strip()]


def cmd_run(args) -> int:
    cfg = _config(args)
    layout = layout_from_config(cfg)
    root = args.checkpoint_dir or cfg.output_dir or None
    sim = Simulation(layout, cfg, strategy_from_config(cfg), root=root)
    try:
        report = sim.run(cfg.n_iters, cfg.ckpt_interval)
    except SimulationError as exc:
        print(exc.report.summary_text())
        print(f"error: {exc}", file=sys.stderr)
        return 2
    finally:
        sim.cleanup()
    status = 0
    try:
        report.check_accounting()
        if any(report.cache_final):
            raise InvariantViolation("staging cache not empty after drain")
        if any(h > report.cache_capacity for h in report.cache_high_water):
            raise InvariantViolation("staging cache exceeded its capacity")
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        status = 1
    if args.out:
        report.write(args.out)
    print(report.summary_text())
    return status


def cmd_sweep_dp(args) -> int:
    cfg = _config(args)
    spec = ModelSpec(n_params=cfg.n_params, layers=cfg.layers, hidden_dim=cfg.hidden_dim)
    rows = dp_sweep(spec, cfg.tp, cfg.pp, _numbers(args.dp), strategy_from_config(cfg), cfg,
                    n_iters=args.n_iters or 1, simulate=not args.sizes_only)
    text = dp_sweep_csv(rows)
    totals = {r.total_bytes - r.metadata_bytes_total for r in rows}
    print(text, end="")
    if args.out:
        Path(args.out).write_text(text)
    if len(totals) > 1:
        print("invariant violation: raw bytes differ across dp", file=sys.stderr)
        return 1
    return 0


def cmd_microbench(args) -> int:
    cfg = _config(args)
    rows = microbench_flush(_numbers(args.sizes), strategy_from_config(cfg), args.mode, cfg,
                            n_ranks=args.ranks)
    text = microbench_csv(rows)
    print(text, end="")
    if args.out:
        Path(args.out).write_text(text)
    return 0


def cmd_inspect(args) -> int:
    try:
        footer = read_footer(args.file)
    except (CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"version {footer.version}  tensor_region_end {footer.tensor_region_end}  "
          f"footer at {footer.footer_offset} ({footer.footer_length} bytes)")
    print("object_id,kind,file_offset,length,object_offset_base,checksum")
    for e in footer.entries:
        print(f"{e.object_id},{KIND_NAMES.get(e.kind, e.kind)},{e.file_offset},{e.length},"
              f"{e.object_offset_base},{e.checksum:016x}")
    return 0


def cmd_verify(args) -> int:
    try:
        counts = verify_checkpoint(args.manifest)
    except (CheckpointError, OSError) as exc:
        print(f"FAILED: {exc}", file=sys.stderr)
        return 1
    print(f"OK: {counts['ranks']} ranks, {counts['files']} files, {counts['objects']} objects")
    return 0


def cmd_layout(args) -> int:
    cfg = _config(args)
    print(layout_summary_csv(layout_from_config(cfg, materialize=False)), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tierstream", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="INI file with a [tierstream] section")
        p.add_argument("--engine", choices=["sync", "two_phase", "lazy"])
        p.add_argument("--no-overlap", action="store_true",
                       help="lazy engine serializes structured state at issue time")
        return p

    p = with_config(sub.add_parser("run", help="simulate a training run"))
    p.add_argument("--n-iters", type=int)
    p.add_argument("--interval", type=int, help="checkpoint every N iterations")
    p.add_argument("--out", help="directory for CSV reports and the summary")
    p.add_argument("--checkpoint-dir", help="keep checkpoint files here")
    p.set_defaults(func=cmd_run)

    p = with_config(sub.add_parser("sweep-dp", help="scale the data-parallel degree"))
    p.add_argument("--dp", default="1,2,4,8,16")
    p.add_argument("--n-iters", type=int)
    p.add_argument("--sizes-only", action="store_true", help="size model only, no simulation")
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep_dp)

    p = with_config(sub.add_parser("microbench", help="flush throughput versus object size"))
    p.add_argument("--sizes", default="64e6,128e6,256e6,512e6,1e9,2e9,4e9,8e9")
    p.add_argument("--mode", default="SIMULATED", type=str.upper, choices=["SIMULATED", "WALL"])
    p.add_argument("--ranks", type=int, default=4)
    p.add_argument("--out")
    p.set_defaults(func=cmd_microbench)

    p = sub.add_parser("inspect", help="print a checkpoint file's footer")
    p.add_argument("file")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("verify", help="checksum every file of a checkpoint")
    p.add_argument("manifest", help="manifest file or checkpoint directory")
    p.set_defaults(func=cmd_verify)

    p = with_config(sub.add_parser("layout", help="print the per-rank layout summary"))
    p.set_defaults(func=cmd_layout)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
