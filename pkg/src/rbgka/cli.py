"""Command-line front end: ``rbgka run`` and ``rbgka sweep``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .crypto import GroupParams
from .region import InvariantViolation
from .sim import (METRICS_HEADER, SWEEP_HEADER, ScenarioError, load_scenario, metrics_to_csv,
                  run_scenario, sweep_rows, sweep_to_csv, trace_to_csv, trace_to_text)

EXIT_OK, EXIT_USAGE, EXIT_SCENARIO, EXIT_INVARIANT = 0, 1, 2, 3

RUN_EPILOG = f"""\
outputs (in --out):
  trace.jsonl   one JSON object per event (--format text): index, kind, member,
                rekeyed key ids, keys, digests, roles, ledger, and hops for sends
  trace.csv     (--format csv) index,kind,member,rekeyed,digests,rounds,
                unicast_units,broadcast_units,serial_exps
  metrics.csv   {",".join(METRICS_HEADER)}

exit codes: 0 ok, 1 usage, 2 scenario read/parse/event error, 3 invariant violation
"""

SWEEP_EPILOG = f"""\
CSV columns: {",".join(SWEEP_HEADER)}
--n takes a comma list (64,128,512) or a doubling range (64..1024).
"""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rbgka", description="Region-based group key agreement simulator.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="replay a scenario file",
                         epilog=RUN_EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    run.add_argument("--scenario", required=True, help="JSON Lines scenario file")
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--g", type=int, default=5, help="generator (default 5)")
    run.add_argument("--p", type=int, default=32713, help="prime modulus (default 32713)")
    run.add_argument("--max-subgroup", type=int, default=100)
    run.add_argument("--out", default="rbgka-out", help="output directory")
    run.add_argument("--format", choices=("text", "csv"), default="text",
                     help="trace format (metrics are always CSV)")

    sw = sub.add_parser("sweep", help="closed-form cost comparison CSV",
                        epilog=SWEEP_EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    sw.add_argument("--protocols", default="RBGKA,GDH,TGDH")
    sw.add_argument("--n", default="64..1024")
    sw.add_argument("--x", type=int, default=100, help="subgroup size X")
    sw.add_argument("--out", help="CSV path (default stdout)")
    return p


def parse_n(spec: str) -> list[int]:
    if ".." in spec:
        lo, hi = (int(x) for x in spec.split("..", 1))
        if lo < 2 or hi < lo:
            raise ValueError(f"invalid range {spec}")
        out = []
        while lo <= hi:
            out.append(lo)
            lo *= 2
        return out
    ns = [int(x) for x in spec.split(",") if x.strip()]
    if not ns or min(ns) < 2:
        raise ValueError(f"invalid N list {spec}")
    return ns


def cmd_run(args) -> int:
    try:
        params = GroupParams(args.g, args.p)
    except ValueError as exc:
        print(f"rbgka: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.max_subgroup < 2:
        print("rbgka: error: --max-subgroup must be >= 2", file=sys.stderr)
        return EXIT_USAGE
    try:
        events = load_scenario(args.scenario)
    except OSError as exc:
        print(f"rbgka: cannot read scenario {args.scenario}: {exc.strerror}", file=sys.stderr)
        return EXIT_SCENARIO
    except ScenarioError as exc:
        print(f"rbgka: {args.scenario}: {exc}", file=sys.stderr)
        return EXIT_SCENARIO
    try:
        result = run_scenario(events, args.seed, params, args.max_subgroup)
    except ScenarioError as exc:
        print(f"rbgka: {args.scenario}: {exc}", file=sys.stderr)
        return EXIT_SCENARIO
    except InvariantViolation as exc:
        print(f"rbgka: invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT

    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        if args.format == "csv":
            (out / "trace.csv").write_text(trace_to_csv(result.trace), encoding="utf-8")
        else:
            (out / "trace.jsonl").write_text(trace_to_text(result.trace), encoding="utf-8")
        (out / "metrics.csv").write_text(metrics_to_csv(result.trace), encoding="utf-8")
    except OSError as exc:
        print(f"rbgka: cannot write to {out}: {exc.strerror}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


def cmd_sweep(args) -> int:
    try:
        ns = parse_n(args.n)
        protocols = tuple(p.strip() for p in args.protocols.split(",") if p.strip())
        if args.x < 1:
            raise ValueError("--x must be >= 1")
        text = sweep_to_csv(sweep_rows(ns, args.x, protocols))
    except ValueError as exc:
        print(f"rbgka: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return cmd_run(args) if args.command == "run" else cmd_sweep(args)


if __name__ == "__main__":
    sys.exit(main())
