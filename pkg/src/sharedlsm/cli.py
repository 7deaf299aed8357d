"""Command line: cost calculator, storage cost table, benchmark runs and diffs.

Exit codes: 0 success, 1 ``bench diff`` found differences, 2 configuration
error, 3 simulation invariant violation.
"""

from __future__ import annotations

import argparse
import configparser
import json
import sys
from pathlib import Path

from .bench import PricingTable, cost_savings, emit_table, parse_csv, run_bench, storage_cost_compare, write_report
from .errors import DomainError, InvariantViolation
from .sim import SimConfig
from .workload import WorkloadSpec

EXIT_OK, EXIT_DIFF, EXIT_CONFIG, EXIT_INVARIANT = 0, 1, 2, 3


def _cost_eq1(args) -> int:
    print(f"{cost_savings(args.s, args.p, args.n):.2f}")
    return EXIT_OK


def _cost_table(args) -> int:
    pricing = PricingTable.from_json(Path(args.prices).read_text()) if args.prices else PricingTable()
    c = storage_cost_compare(pricing, args.scenario, args.cache_ratio)
    print(f"scenario         {args.scenario}")
    print(f"shared-nothing   ${c.shared_nothing:,.2f}/month")
    print(f"shared-storage   ${c.shared_storage:,.2f}/month")
    print(f"savings          {c.savings_pct:.1f}%")
    return EXIT_OK


def _bench_run(args) -> int:
    text = Path(args.config).read_text()
    cfg = SimConfig.from_ini(text)
    if args.seed is not None:
        cfg.seed = args.seed
    workload = WorkloadSpec.from_ini(Path(args.workload).read_text()) if args.workload else None
    report, sim = run_bench(cfg, workload)
    out = Path(args.out)
    write_report(report, sim, out)
    sys.stdout.write(emit_table(report))
    if report.violations:
        for v in report.violations:
            print(f"violation: {v}", file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


def _bench_diff(args) -> int:
    a, b = Path(args.a), Path(args.b)
    if a.is_dir():
        a, b = a / "metrics.csv", b / "metrics.csv"
    ra, rb = parse_csv(a.read_text()), parse_csv(b.read_text())
    diffs = 0
    for i in range(max(len(ra), len(rb))):
        x = ra[i] if i < len(ra) else None
        y = rb[i] if i < len(rb) else None
        if x != y:
            diffs += 1
            print(f"bucket {i}: {x} != {y}")
    print("identical" if diffs == 0 else f"{diffs} differing buckets")
    return EXIT_OK if diffs == 0 else EXIT_DIFF


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sharedlsm", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="group", required=True)

    cost = sub.add_parser("cost", help="storage cost model").add_subparsers(dest="cmd", required=True)
    eq = cost.add_parser("eq1", help="cost reduction factor of shared storage")
    eq.add_argument("--s", type=float, required=True, help="spatial utilization, 0 < S <= 1")
    eq.add_argument("--p", type=float, required=True, help="hot data ratio, 0 <= P <= 1")
    eq.add_argument("--n", type=int, required=True, help="replica count")
    eq.set_defaults(fn=_cost_eq1)
    tab = cost.add_parser("table", help="monthly storage cost of both architectures")
    tab.add_argument("--scenario", choices=("oltp", "olap"), required=True)
    tab.add_argument("--prices", help="JSON file overriding the PricingTable fields")
    tab.add_argument("--cache-ratio", type=float, help="override the scenario's disk cache ratio")
    tab.set_defaults(fn=_cost_table)

    bench = sub.add_parser("bench", help="simulated benchmarks").add_subparsers(dest="cmd", required=True)
    run = bench.add_parser("run", help="run one simulation and write metrics")
    run.add_argument("--config", required=True, help="INI file with [sim], [node.*], [fault.*]")
    run.add_argument("--workload", help="INI file with a [workload] section")
    run.add_argument("--seed", type=int)
    run.add_argument("--out", required=True, help="output directory")
    run.set_defaults(fn=_bench_run)
    diff = bench.add_parser("diff", help="compare two metrics CSVs (or run directories)")
    diff.add_argument("a")
    diff.add_argument("b")
    diff.set_defaults(fn=_bench_diff)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (DomainError, ValueError, KeyError, OSError, json.JSONDecodeError, configparser.Error) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
