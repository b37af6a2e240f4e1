"""Command line front end for the benchmark harness."""

from __future__ import annotations

import argparse
import sys

from .bench import ANCHOR_TICKS, BenchConfig, calibrate, emit, run_matrix
from .device import load_profile
from .errors import SimError


def _int_list(text: str) -> tuple:
    try:
        values = tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"expected comma-separated integers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("expected at least one integer")
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="taskfuse",
        description="virtual-accelerator benchmark of GPU work aggregation")
    sub = parser.add_subparsers(dest="command", required=True)

    bench = sub.add_parser(
        "bench", help="sweep executor/aggregation configurations")
    bench.add_argument("--subgrid-n", type=int, default=8,
                       help="sub-grid edge length (default 8)")
    bench.add_argument("--executors", type=_int_list, default=(1,),
                       help="comma-separated executor counts; 0 = host only")
    bench.add_argument("--max-team", type=_int_list, default=(1,),
                       help="comma-separated aggregation caps")
    bench.add_argument("--profile", default="a100like",
                       help="built-in profile name or path to a .profile file")
    bench.add_argument("--steps", type=int, default=15,
                       help="measured steps per cell, after one warm-up step")
    bench.add_argument("--format", dest="fmt", choices=("csv", "markdown"),
                       default="csv")
    bench.add_argument("--out", help="write the report to this file")
    bench.add_argument("--dump-events",
                       help="write the last cell's device event log (CSV) "
                            "to this file")

    cal = sub.add_parser(
        "calibrate",
        help="solve per-kernel work factors against the anchor timings")
    cal.add_argument("--profile", default="a100like")
    cal.add_argument("--out", help="write the calibration to this file")
    return parser


def _calibration_text(name: str) -> str:
    profile = load_profile(name)
    solved = calibrate(profile)
    lines = [f"profile={name}",
             f"t_block={profile.t_block}",
             f"t_launch={profile.t_launch}"]
    for kernel in sorted(solved.work_factors):
        lines.append(f"work_factor.{kernel}={solved.work_factors[kernel]}")
    for kernel in sorted(ANCHOR_TICKS):
        lines.append(f"solo_ticks.{kernel}={ANCHOR_TICKS[kernel]}")
    return "\n".join(lines) + "\n"


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "bench":
            cfg = BenchConfig(subgrid_n=args.subgrid_n,
                              executors=args.executors,
                              max_team=args.max_team,
                              profile=args.profile,
                              steps=args.steps,
                              fmt=args.fmt)
            report = run_matrix(cfg, dump_events=args.dump_events)
            text = emit(report, cfg.fmt)
        else:
            text = _calibration_text(args.profile)
    except (SimError, OSError) as exc:
        print(f"taskfuse: {exc}", file=sys.stderr)
        return 2
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


if __name__ == "__main__":
    sys.exit(main())
