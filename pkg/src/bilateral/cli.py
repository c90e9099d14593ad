"""Command line entry point: ``bilateral {run,verify,replay,report}``.

Exit codes: ``run`` returns 0 when every interval agreed, 2 when any
interval was escalated, 1 on error; ``verify`` returns 0 only when every
check passes.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .audit import find_outcome, format_replay, verify_run
from .errors import BilateralError
from .simulator import REPORT_TABLE, load_scenario, run, with_overrides


def _cmd_run(args) -> int:
    scenario = with_overrides(
        load_scenario(args.scenario), seed=args.seed, tolerance=args.tolerance, max_rounds=args.max_rounds
    )
    report = run(scenario, args.out_dir)
    sys.stdout.write(report.to_table())
    return 0 if report.all_agreed else 2


def _cmd_verify(args) -> int:
    result = verify_run(args.out_dir)
    for p in result.problems:
        print(f"FAIL {p}")
    if result.ok:
        print(f"OK {result.entries_checked} entries verified")
        return 0
    return 1


def _cmd_replay(args) -> int:
    found = find_outcome(args.out_dir, args.interval)
    if found is None:
        print(f"interval {args.interval} not found", file=sys.stderr)
        return 1
    sys.stdout.write(format_replay(*found))
    return 0


def _cmd_report(args) -> int:
    sys.stdout.write((Path(args.out_dir) / REPORT_TABLE).read_text(encoding="utf-8"))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bilateral", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="simulate a scenario and write logs, evidence and report")
    p.add_argument("scenario", help="scenario file (key=value lines)")
    p.add_argument("out_dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--tolerance", type=int)
    p.add_argument("--max-rounds", type=int, dest="max_rounds")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("verify", help="re-check signatures and re-derive agreed amounts")
    p.add_argument("out_dir")
    p.set_defaults(func=_cmd_verify)

    p = sub.add_parser("replay", help="print one interval's negotiation round by round")
    p.add_argument("out_dir")
    p.add_argument("interval", type=int)
    p.set_defaults(func=_cmd_replay)

    p = sub.add_parser("report", help="print the run summary table")
    p.add_argument("out_dir")
    p.set_defaults(func=_cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (BilateralError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
