"""Command-line interface: run experiments, compare placements, validate regexes."""

from __future__ import annotations

import argparse
import sys

from .harness import (compare, default_table_path, load_experiment_config,
                      run_experiment, validate_regex)
from .workload import generate_trace


def _cmd_run(args):
    config = load_experiment_config(args.config)
    report = run_experiment(config, seed=args.seed, out_dir=args.out)
    s = report.summary
    print(f"run {report.run_id}: {len(report.records)} frames, "
          f"median {s['median_us'] / 1000:.1f} ms, p99 {s['p99_us'] / 1000:.1f} ms, "
          f"{s['fps']:.2f} fps, {s['total_remote_bytes']} remote bytes, "
          f"hit rate {s['cache_hit_rate']:.3f}"
          + (" [saturated]" if report.saturated else ""))
    if args.out:
        for name, path in report.paths.items():
            print(f"  {name}: {path}")
    return 0


def _cmd_compare(args):
    configs = [load_experiment_config(path) for path in args.configs]
    rows = compare(configs, out_dir=args.out, repetitions=args.repetitions,
                   seed=args.seed)
    width = max(len(r["label"]) for r in rows)
    print(f"{'config'.ljust(width)}  median_ms  p75_ms  p99_ms  frames")
    for r in rows:
        print(f"{r['label'].ljust(width)}  {r['median_us'] / 1000:9.1f}  "
              f"{r['p75_us'] / 1000:6.1f}  {r['p99_us'] / 1000:6.1f}  {r['frames']:6d}")
    if args.out:
        print(f"wrote {args.out}/comparison.csv and comparison.png")
    return 0


def _cmd_validate_regex(args):
    table = args.table or default_table_path()
    rows = validate_regex(table)
    failures = 0
    for row in rows:
        if row["status"] == "ungrouped":
            print(f"{row['pool']:14s} ungrouped (no regex)")
            continue
        ok = row["status"] == "match"
        failures += 0 if ok else 1
        print(f"{row['pool']:14s} {row['status']:9s} "
              f"{row['example_key']} -> {row['actual'] or '(no match)'}"
              + ("" if ok else f" (expected {row['expected']})"))
    matched = sum(1 for r in rows if r["status"] == "match")
    ungrouped = sum(1 for r in rows if r["status"] == "ungrouped")
    print(f"{matched} match, {failures} mismatch, {ungrouped} ungrouped")
    return 1 if failures else 0


def _cmd_trace(args):
    config = load_experiment_config(args.config)
    workload = config.workload if args.seed is None else config.workload.with_seed(args.seed)
    trace = generate_trace(workload)
    trace.to_csv(args.out)
    total = sum(len(t) for t in trace.tracks.values())
    print(f"wrote {args.out}: {len(trace.clients)} clients, "
          f"{workload.frames} frames, {total} actor tracks")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="affinitysim",
        description="Deterministic sharded-K/V pipeline simulator with "
                    "affinity-key placement.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment config")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--out", default=None)
    p_run.set_defaults(func=_cmd_run)

    p_cmp = sub.add_parser("compare", help="run several configs over one trace")
    p_cmp.add_argument("--configs", nargs="+", required=True)
    p_cmp.add_argument("--out", default=None)
    p_cmp.add_argument("--seed", type=int, default=None)
    p_cmp.add_argument("--repetitions", type=int, default=3)
    p_cmp.set_defaults(func=_cmd_compare)

    p_val = sub.add_parser("validate-regex", help="check a pool table's regexes")
    p_val.add_argument("--table", default=None)
    p_val.set_defaults(func=_cmd_validate_regex)

    p_tr = sub.add_parser("trace", help="export the workload trace as CSV")
    p_tr.add_argument("--config", required=True)
    p_tr.add_argument("--seed", type=int, default=None)
    p_tr.add_argument("--out", required=True)
    p_tr.set_defaults(func=_cmd_trace)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
