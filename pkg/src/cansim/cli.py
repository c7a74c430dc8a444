"""Command-line surface: simulate, validate and compare scenario runs.

Exit codes: 0 success, 1 configuration error, 2 internal invariant violation.
Set CANSIM_LOG to debug/info/warning to adjust log verbosity.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from .metrics import (InternalError, MetricsReport, SchemaMismatchError,
                      compare, render_delta)
from .runner import run, write_metrics, write_trace
from .scenario import ConfigError, load_scenario

log = logging.getLogger("cansim")


def _setup_logging() -> None:
    level = os.environ.get("CANSIM_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _cmd_simulate(args) -> int:
    scenario = load_scenario(args.scenario)
    if args.seed is not None:
        scenario.seed = args.seed
    log.info("running %s (seed %d)", scenario.name, scenario.seed)
    result = run(scenario)
    if args.trace:
        write_trace(result, args.trace)
        log.info("trace written to %s", args.trace)
    if args.metrics:
        write_metrics(result, args.metrics)
        log.info("metrics written to %s", args.metrics)
    print(result.metrics.summary_table())
    return 0


def _cmd_validate(args) -> int:
    scenario = load_scenario(args.scenario)
    print(f"{args.scenario}: ok ({scenario.name}, {len(scenario.nodes)} nodes, "
          f"{len(scenario.attacks)} attacks, {len(scenario.icewalls)} icewalls)")
    return 0


def _cmd_compare(args) -> int:
    with open(args.report_a) as fh:
        report_a = MetricsReport.from_jsonl(fh.read())
    with open(args.report_b) as fh:
        report_b = MetricsReport.from_jsonl(fh.read())
    print(render_delta(compare(report_a, report_b)))
    return 0


def main(argv=None) -> int:
    _setup_logging()
    parser = argparse.ArgumentParser(
        prog="cansim",
        description="Deterministic bit-level CAN bus attack/defense simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="run a scenario file")
    p_sim.add_argument("--scenario", required=True)
    p_sim.add_argument("--seed", type=int, default=None,
                       help="override the scenario seed")
    p_sim.add_argument("--trace", help="write the trace log here")
    p_sim.add_argument("--metrics", help="write JSONL metrics here")
    p_sim.set_defaults(func=_cmd_simulate)

    p_val = sub.add_parser("validate", help="validate a scenario file")
    p_val.add_argument("scenario")
    p_val.set_defaults(func=_cmd_validate)

    p_cmp = sub.add_parser("compare", help="diff two metrics reports")
    p_cmp.add_argument("report_a")
    p_cmp.add_argument("report_b")
    p_cmp.set_defaults(func=_cmd_compare)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"error: {problem}", file=sys.stderr)
        return 1
    except SchemaMismatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (InternalError, AssertionError) as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
