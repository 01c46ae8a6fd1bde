"""Command line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime failure. Runtime failures
print ``<ErrorName>: <message>`` on stderr.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import orchestrator as orch
from .errors import ConfigError, ReportError, TradeoffError
from .recommender import Choice, RecommendationContext, load_rules, recommend, resolve_probe
from .report import render_report

ENV_LEDGER = "TLTRADEOFF_LEDGER"
ENV_JOBS = "TLTRADEOFF_JOBS"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _global_options(parser, suppress):
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--seed", type=int, default=default, help="override the plan's seed list with one seed")
    parser.add_argument("--jobs", type=int, default=default, help="parallel experiment workers")
    parser.add_argument("--time-limit-hours", type=float, default=default, help="per-experiment wall-clock limit")
    parser.add_argument("--ledger", default=default, help="JSON-lines ledger path")
    parser.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)


def build_parser():
    parser = _Parser(prog="tltradeoff", description="Feature extraction vs fine-tuning benchmark harness")
    _global_options(parser, suppress=False)
    common = _Parser(add_help=False)
    _global_options(common, suppress=True)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    for name, helptext in (
        ("search", "run the hyperparameter grid search of a plan"),
        ("fewshot", "run the few-shot protocol with the best configs found by search"),
        ("reselect", "repeat model selection on reduced train subsets and report the drop"),
    ):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("plan")

    p = sub.add_parser("recommend", parents=[common], help="FE / FT recommendation")
    p.add_argument("--overlap", required=True, choices=["subset", "intersect", "disjoint", "unknown"])
    p.add_argument("--ic", required=True, type=int, help="training samples per class")
    p.add_argument("--priority", default="performance", choices=["performance", "cost"])
    p.add_argument("--pretrained", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--rules", help="alternative rules file")
    p.add_argument("--measured-ft", type=float, help="FT test accuracy from a probe run")
    p.add_argument("--measured-fe", type=float, help="FE test accuracy from a probe run")

    p = sub.add_parser("report", parents=[common], help="render tables and CSVs from a ledger")
    p.add_argument("ledger_path", metavar="ledger")
    p.add_argument("--out", required=True)

    p = sub.add_parser("annotate", parents=[common], help="record analyst hours on a ledger")
    p.add_argument("ledger_path", metavar="ledger")
    p.add_argument("--analyst-hours", required=True, type=float)
    p.add_argument("--approach", choices=["FE", "FT"])
    return parser


def _load_plan(args):
    plan = orch.load_plan(args.plan)
    if args.seed is not None:
        plan.seeds = (args.seed,)
    jobs = args.jobs if args.jobs is not None else os.environ.get(ENV_JOBS)
    if jobs is not None:
        plan.parallel_workers = int(jobs)
    if args.time_limit_hours is not None:
        plan.time_limit = args.time_limit_hours
    ledger_path = args.ledger or os.environ.get(ENV_LEDGER) or (plan.ledger and plan.resolve(plan.ledger))
    if not ledger_path:
        ledger_path = Path(args.plan).with_suffix(".ledger.jsonl")
    return plan, orch.SearchLedger(ledger_path)


def cmd_search(args):
    plan, ledger = _load_plan(args)
    before = ledger.n_exp
    orch.run_search(plan, ledger)
    print(f"executed {ledger.n_exp - before} new experiments; ledger holds {ledger.n_exp}")
    for task, (approach, cfg, v_acc) in sorted(ledger.best_per_task.items()):
        print(f"best {task}: {approach} V_ACC={v_acc:.2f} {cfg}")
    return 0


def cmd_fewshot(args):
    plan, ledger = _load_plan(args)
    fs = plan.fewshot
    if not fs.get("ic_grid"):
        raise ConfigError("plan has no fewshot.ic_grid")
    best = None
    if fs.get("best"):
        best = {(e["task"], e["approach"]): (e["source"], orch.config_from_dict(e["approach"], e.get("config", {})))
                for e in fs["best"]}
    before = ledger.n_exp
    res = orch.run_fewshot_protocol(plan, fs["ic_grid"], best, fs.get("n_subsets", 5), fs.get("base_seed", 0), ledger)
    print(f"executed {ledger.n_exp - before} new experiments; ledger holds {ledger.n_exp}")
    for task, ic, reason in res.skipped:
        print(f"skipped {task} ic={ic}: {reason}")
    for task, points in res.curves.items():
        for p in points:
            print(f"{task} ic={p.ic}: rel diff mean {p.rel_diff_mean:.2f}% [{p.rel_diff_min:.2f}, {p.rel_diff_max:.2f}]")
        if task in res.time_ratio:
            print(f"{task}: FT time grows {res.time_ratio[task]:.2f}x faster than FE per extra sample/class")
    return 0


def cmd_reselect(args):
    plan, ledger = _load_plan(args)
    rs = plan.reselect
    if not rs.get("task") or not rs.get("ic_values"):
        raise ConfigError("plan needs reselect.task and reselect.ic_values")
    rows = orch.run_reselection(plan, rs["task"], rs["ic_values"], base_seed=rs.get("base_seed", 0), ledger=ledger)
    print("ic  approach  src  config  V_ACC  drop")
    for r in rows:
        print(f"{r.ic}  {r.approach}  {r.source}  {r.config}  {r.v_acc:.2f}  {r.drop:.2f}")
    return 0


def cmd_recommend(args):
    ctx = RecommendationContext(args.pretrained, args.overlap, args.ic, args.priority)
    rec = recommend(ctx, load_rules(args.rules) if args.rules else None)
    for question, answer in rec.path:
        print(f"  {question} -> {answer}")
    print(f"recommendation: {rec.choice.value}  ({rec.rationale})")
    if rec.choice == Choice.PROBE_BOTH and args.measured_ft is not None and args.measured_fe is not None:
        print(f"resolved with measured accuracies: {resolve_probe(args.measured_ft, args.measured_fe).value}")
    return 0


def cmd_report(args):
    try:
        ledger = orch.SearchLedger.load(args.ledger_path)
    except FileNotFoundError as exc:
        raise ReportError(str(exc)) from exc
    bundle = render_report(ledger)
    for name in bundle.write(args.out):
        print(Path(args.out) / name)
    return 0


def cmd_annotate(args):
    ledger = orch.SearchLedger.load(args.ledger_path)
    ledger.annotate(args.analyst_hours, args.approach)
    print(f"analyst hours: {ledger.analyst_hours}")
    return 0


COMMANDS = {
    "search": cmd_search,
    "fewshot": cmd_fewshot,
    "reselect": cmd_reselect,
    "recommend": cmd_recommend,
    "report": cmd_report,
    "annotate": cmd_annotate,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (TradeoffError, FileNotFoundError, OSError) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
