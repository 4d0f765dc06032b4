import argparse
import logging
import os
import sys

from uavloc.config_reader import UavlocConfig, _get_log_level
from uavloc.geo_env import save_map
from uavloc.harness import (BENCH_PIPELINES, BatchReport, Scenario, emit_results, replay, run_batch, run_bench,
                            run_trial, sweep_budgets)
from uavloc.radio_model import save_measurements
from uavloc.utils.io_utils import write_table, write_yaml_file

logger = logging.getLogger(__name__)

LOG_FORMAT = "[%(asctime)s] %(levelname)s [%(name)s.%(funcName)s] %(message)s"
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")


def _add_common(parser):
    parser.add_argument("--scenario", help="scenario YAML layered over the shipped default (env UAVLOC_SCENARIO)")
    parser.add_argument("--output-dir", help="directory for result tables (env UAVLOC_OUTPUT_DIR)")
    parser.add_argument("--workers", type=int, help="parallel trial processes (env UAVLOC_WORKERS)")
    parser.add_argument("--log-level", help="DEBUG, INFO, WARNING or ERROR (env UAVLOC_LOG_LEVEL)")


def _add_seeds(parser):
    parser.add_argument("--trials", type=int, default=None, help="number of trials, seeds start at the scenario seed")
    parser.add_argument("--seeds", type=int, nargs="+", default=None, help="explicit trial seeds")


def build_parser():
    parser = argparse.ArgumentParser(prog="uavloc",
                                     description="UAV-aided user localization: simulate, estimate and benchmark")
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="run a single trial")
    _add_common(run)
    run.add_argument("--seed", type=int, default=None, help="trial seed (default: scenario seed)")
    run.add_argument("--save-measurements", action="store_true", help="also write the map and measurement tables")

    batch = commands.add_parser("batch", help="run a Monte-Carlo batch")
    _add_common(batch)
    _add_seeds(batch)

    bench = commands.add_parser("bench", help="compare the benchmark pipelines on the same seeds")
    _add_common(bench)
    _add_seeds(bench)
    bench.add_argument("--budget", type=float, default=None, help="trajectory budget in meters")
    bench.add_argument("--pipelines", nargs="+", choices=sorted(BENCH_PIPELINES), default=None)

    sweep = commands.add_parser("sweep", help="localization RMSE versus trajectory budget")
    _add_common(sweep)
    _add_seeds(sweep)
    sweep.add_argument("--budgets", type=float, nargs="+", required=True, help="budgets in meters")

    replay_cmd = commands.add_parser("replay", help="re-run the batch echoed in a summary.yaml")
    _add_common(replay_cmd)
    replay_cmd.add_argument("summary", help="summary.yaml written by a previous batch")
    return parser


def _seeds(args, scenario):
    if args.seeds:
        return args.seeds
    n_trials = args.trials if args.trials is not None else 1
    if n_trials < 1:
        raise ValueError(f"--trials must be at least 1, got {n_trials}")
    return [scenario.seed + i for i in range(n_trials)]


def _run(args, scenario, out_dir):
    seed = scenario.seed if args.seed is None else args.seed
    trial = run_trial(scenario, seed, keep_artifacts=True)
    emit_results(BatchReport(scenario=scenario, seeds=[seed], trials=[trial]), out_dir)
    mission = trial.artifacts.get("mission")
    if mission is not None:
        write_table(mission.to_frame(), os.path.join(out_dir, "trajectory.csv"))
    result = trial.artifacts["result"]
    write_yaml_file(result.params.to_dict(), os.path.join(out_dir, "params.yaml"))
    write_table(result.classification.to_frame(), os.path.join(out_dir, "labels.csv"))
    if args.save_measurements:
        save_map(trial.artifacts["map"], os.path.join(out_dir, "map.yaml"))
        save_measurements(trial.artifacts["measurements"], os.path.join(out_dir, "measurements"))


def _dispatch(args, config):
    out_dir = args.output_dir or config.output_dir
    workers = args.workers or config.workers
    if args.command == "replay":
        replay(args.summary, out_dir, workers=workers)
        return
    scenario = Scenario.from_dict(config.scenario)
    if args.command == "run":
        _run(args, scenario, out_dir)
    elif args.command == "batch":
        emit_results(run_batch(scenario, seeds=_seeds(args, scenario), workers=workers), out_dir)
    elif args.command == "bench":
        reports, comparison = run_bench(scenario, _seeds(args, scenario), workers=workers, budget=args.budget,
                                        pipelines=args.pipelines)
        for name, report in reports.items():
            emit_results(report, os.path.join(out_dir, name))
        write_table(comparison, os.path.join(out_dir, "bench.csv"))
    elif args.command == "sweep":
        write_table(sweep_budgets(scenario, args.budgets, _seeds(args, scenario), workers=workers),
                    os.path.join(out_dir, "sweep.csv"))


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    level = (args.log_level or _get_log_level()).upper()
    if level not in LOG_LEVELS:
        parser.error(f"Invalid log level {level}. Must be one of the following: {', '.join(LOG_LEVELS)}")
    logging.basicConfig(format=LOG_FORMAT, level=level)
    try:
        config = UavlocConfig(args.scenario)
        _dispatch(args, config)
    except Exception as ex:
        logger.exception(f"uavloc {args.command} failed: {ex}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
