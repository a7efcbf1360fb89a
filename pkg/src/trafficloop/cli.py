"""Command-line entry point.

    trafficloop validate --config SCENARIO
    trafficloop run      --config SCENARIO [--policy both|fixed|adaptive] [--seeds K] [--csv DIR]
    trafficloop loop     --config SCENARIO [--seeds K] [--csv DIR]
    trafficloop fit      HISTORY_CSV --p P --q Q [--ridge R]

Exit codes: 0 success, 1 usage or config error, 2 runtime fault.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, load_config, read_history_csv, shipped_scenario
from .experiment import compare, dumps, mean_metrics, run_many, write_csvs
from .prediction import InsufficientHistoryError, dump_models, fit

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

logger = logging.getLogger("trafficloop")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _config_path(value: str) -> Path:
    path = Path(value)
    if not path.exists() and "/" not in value and not value.endswith(".yaml"):
        try:
            return shipped_scenario(value)
        except FileNotFoundError:
            pass
    return path


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=_config_path,
                        help="scenario YAML file, or the name of a shipped scenario")
    common.add_argument("--seed", type=int, help="first seed (default: the scenario's seed)")
    common.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds")
    common.add_argument("--csv", type=Path, help="directory for per-interval CSV output")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for per-seed runs")
    common.add_argument("--quiet", action="store_true", help="only print the JSON result")

    parser = _Parser(prog="trafficloop", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("validate", parents=[common], help="check a scenario file")

    p_run = sub.add_parser("run", parents=[common], help="fixed vs adaptive comparison (direct calls)")
    p_run.add_argument("--policy", choices=("both", "fixed", "adaptive"), default="both")

    sub.add_parser("loop", parents=[common], help="adaptive control closed over the message bus")

    p_fit = sub.add_parser("fit", parents=[common], help="fit ARX models from a history CSV")
    p_fit.add_argument("history_csv", type=Path)
    p_fit.add_argument("--p", type=int, default=1)
    p_fit.add_argument("--q", type=int, default=0)
    p_fit.add_argument("--ridge", type=float, default=0.0)
    return parser


def _seeds(args, config) -> list[int]:
    if args.seeds < 1:
        raise ConfigError("--seeds", "must be >= 1")
    base = config.seed if args.seed is None else args.seed
    return [base + i for i in range(args.seeds)]


def cmd_validate(args) -> int:
    config = load_config(args.config)
    spec = config.intersection
    doc = {
        "name": config.name,
        "approaches": spec.approach_ids,
        "cycle_length_s": spec.cycle_length_s,
        "green_budget_s": spec.green_budget_s,
        "duration_s": config.duration_s,
        "exogenous": list(config.exogenous.names),
        "notices": list(config.notices),
        "valid": True,
    }
    print(dumps(doc))
    return EXIT_OK


def cmd_run(args) -> int:
    config = load_config(args.config)
    seeds = _seeds(args, config)
    if args.policy == "both":
        report, results = compare(config, seeds, args.jobs)
        doc = report.to_dict()
        if not args.quiet:
            logger.info("mean wait: fixed %.2f s, adaptive %.2f s (%.1f%% reduction over %d seeds)",
                        report.fixed.mean_wait_s, report.adaptive.mean_wait_s,
                        report.wait_reduction_pct, report.seeds_used)
    else:
        results = run_many(config, (args.policy,), seeds, args.jobs)
        doc = {args.policy: mean_metrics(results).to_dict(), "seeds_used": len(seeds)}
    if args.csv:
        write_csvs(results, args.csv)
        (args.csv / "summary.json").write_text(dumps(doc) + "\n")
    print(dumps(doc))
    faults = sum(r.metrics.faults for r in results)
    return EXIT_RUNTIME if faults else EXIT_OK


def cmd_loop(args) -> int:
    config = load_config(args.config)
    seeds = _seeds(args, config)
    results = run_many(config, ("loop",), seeds, args.jobs)
    totals: dict[str, int] = {}
    for r in results:
        for topic, count in r.loop_stats["messages_by_topic"].items():
            totals[topic] = totals.get(topic, 0) + count
    doc = {
        "adaptive": mean_metrics(results).to_dict(),
        "seeds_used": len(seeds),
        "bus": {
            "messages_by_topic": dict(sorted(totals.items())),
            "drops": sum(r.loop_stats["drops"] for r in results),
            "decisions": sum(r.loop_stats["decisions"] for r in results),
            "statuses": sum(r.loop_stats["statuses"] for r in results),
            "rejected": sum(r.loop_stats["rejected"] for r in results),
            "stale_rounds": sum(r.loop_stats["stale_rounds"] for r in results),
        },
        "per_seed": [{"seed": r.seed, "mean_wait_s": r.metrics.mean_wait_s, **r.loop_stats} for r in results],
    }
    if args.csv:
        write_csvs(results, args.csv)
        (args.csv / "summary.json").write_text(dumps(doc) + "\n")
    print(dumps(doc))
    faults = sum(r.metrics.faults for r in results)
    return EXIT_RUNTIME if faults else EXIT_OK


def cmd_fit(args) -> int:
    try:
        history = read_history_csv(args.history_csv, args.q)
    except FileNotFoundError:
        raise ConfigError("history_csv", f"no such file: {args.history_csv}") from None
    except ValueError as exc:
        raise ConfigError("history_csv", str(exc)) from None
    models, reports = [], []
    for aid in sorted(history):
        obs, recs = history[aid]
        try:
            model, report = fit(obs, recs, args.p, args.q, args.ridge)
        except InsufficientHistoryError as exc:
            raise ConfigError("history_csv", str(exc)) from None
        models.append(model)
        reports.append(report)
    text = dump_models(models, reports)
    if args.csv:
        args.csv.mkdir(parents=True, exist_ok=True)
        (args.csv / "models.json").write_text(text + "\n")
    print(text)
    return EXIT_OK


COMMANDS = {"validate": cmd_validate, "run": cmd_run, "loop": cmd_loop, "fit": cmd_fit}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.command != "fit" and args.config is None:
        parser.error(f"{args.command} requires --config")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - surfaced as exit code 2
        logger.exception("runtime fault: %s", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
