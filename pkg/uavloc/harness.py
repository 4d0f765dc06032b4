import copy
import functools
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from uavloc.algorithm import Algorithm1Config, run_algorithm1
from uavloc.config_reader import merge_scenario, validate_scenario_dict
from uavloc.em_learn import EmConfig, classification_error
from uavloc.fim_planner import PlannerConfig, rectangle_trajectory, run_mission_online
from uavloc.geo_env import LosPredictorParams, generate_city, load_map, place_users
from uavloc.radio_model import ChannelParams, OdometryNoise, collect_mission
from uavloc.slam.solver import SolverConfig, SolverError
from uavloc.utils.io_utils import read_yaml_file, write_table, write_yaml_file
from uavloc.utils.modes import EstimatorMode, PlannerMode, validate_estimator_mode, validate_planner_mode

logger = logging.getLogger(__name__)

TRIALS_FILE = "trials.csv"
CDF_FILE = "cdf.csv"
SUMMARY_FILE = "summary.yaml"
TRIAL_COLUMNS = ["seed", "user", "error", "uav_rmse", "classification_error", "converged", "runtime", "failure"]

BENCH_PIPELINES = {
    "proposed": (PlannerMode.OPTIMIZED, EstimatorMode.FULL),
    "rss-only": (PlannerMode.OPTIMIZED, EstimatorMode.RSS_ONLY),
    "bs-only": (PlannerMode.STATIC_BS_ONLY, EstimatorMode.FULL),
    "rectangle": (PlannerMode.RANDOM_RECTANGLE, EstimatorMode.FULL),
}


def log_call(func):
    @functools.wraps(func)
    def wrapper_log(*args, **kwargs):
        logger.info(f"Calling {func.__name__}")
        try:
            return func(*args, **kwargs)
        except Exception as e:
            logger.error("Error calling function {}".format(func.__name__))
            logger.exception(e)
            raise e

    return wrapper_log


@dataclass(frozen=True, eq=False)
class Scenario:
    raw: dict
    seed: int
    channel: ChannelParams
    prior: ChannelParams
    noise: OdometryNoise
    predictor: LosPredictorParams
    algorithm: Algorithm1Config
    planner_mode: PlannerMode
    estimator_mode: EstimatorMode
    budget: float
    n_epochs: int

    @classmethod
    def from_dict(cls, raw):
        """
        Build a typed scenario from a complete scenario dict (see config_reader.load_scenario).

        Raises:
            ValueError: If a section is missing, malformed or holds an invalid value.
        """
        raw = validate_scenario_dict(copy.deepcopy(raw))
        try:
            uav = raw["uav"]
            budget = float(uav["budget"])
            n_epochs = int(uav["n_epochs"])
            estimator_mode = validate_estimator_mode(raw["estimator"]["mode"])
            algorithm = Algorithm1Config(
                outer_tol=float(raw["algorithm"]["outer_tol"]),
                max_outer_iters=int(raw["algorithm"]["max_outer_iters"]),
                grid_step=float(raw["algorithm"]["grid_step"]),
                mode=estimator_mode,
                em=EmConfig.from_dict(raw["em"]),
                solver=SolverConfig.from_dict(raw["solver"]))
            scenario = cls(raw=raw, seed=int(raw.get("seed") or 0),
                           channel=ChannelParams.from_dict(raw["channel"]),
                           prior=ChannelParams.from_dict(raw["prior"]),
                           noise=OdometryNoise.from_dict(raw["odometry"], dt=float(uav.get("dt", 1.0))),
                           predictor=LosPredictorParams(**raw["los_predictor"]),
                           algorithm=algorithm,
                           planner_mode=validate_planner_mode(raw["planner"]["mode"]),
                           estimator_mode=estimator_mode, budget=budget, n_epochs=n_epochs)
        except (KeyError, TypeError) as ex:
            raise ValueError(f"Malformed scenario: {ex}") from ex
        if budget <= 0 or n_epochs < 1:
            raise ValueError(f"Scenario needs a positive budget and at least one epoch, got {budget}, {n_epochs}")
        if int(raw["users"]["count"]) < 1 and not raw["users"].get("positions"):
            raise ValueError("Scenario needs at least one user")
        return scenario

    def to_dict(self):
        return copy.deepcopy(self.raw)

    def with_overrides(self, overrides):
        return Scenario.from_dict(merge_scenario(self.raw, overrides))

    @property
    def d_max(self):
        return self.budget / self.n_epochs

    @property
    def bs_sites(self):
        key = "bs_only_sites" if self.planner_mode is PlannerMode.STATIC_BS_ONLY else "sites"
        return [list(map(float, site)) for site in self.raw["bs"][key] or []]

    def build_map(self, seed):
        city = self.raw["city"]
        if city.get("map_file"):
            urban_map = load_map(city["map_file"])
        else:
            # keep both BS layouts and the take-off point clear so every mode flies over one city
            keepout = list(self.raw["bs"].get("sites") or []) + list(self.raw["bs"].get("bs_only_sites") or [])
            keepout.append(self.raw["uav"]["start"])
            urban_map = generate_city(seed if city.get("seed") is None else int(city["seed"]),
                                      area=city["area"], n_buildings=int(city["n_buildings"]),
                                      height_scale=float(city["height_scale"]),
                                      height_range=city["height_range"], size_range=city["size_range"],
                                      keepout=keepout)
        return urban_map.with_bs_sites(self.bs_sites)

    def place_users(self, urban_map, rng):
        users = self.raw["users"]
        if users.get("positions"):
            return np.asarray(users["positions"], dtype=float).reshape(-1, 2)
        return place_users(urban_map, int(users["count"]), rng, margin=float(users.get("margin", 0.0)))

    def planner_config(self, area):
        planner = self.raw["planner"]
        return PlannerConfig(d_max=self.d_max, n_total=self.n_epochs, x_start=self.raw["uav"]["start"],
                             x_end=self.raw["uav"]["end"], neighbor_step=planner.get("neighbor_step"),
                             prior_fim_eps=float(planner.get("prior_fim_eps", 1e-4)),
                             stay_in_area=bool(planner.get("stay_in_area", True)), area=area,
                             min_distance=self.algorithm.solver.min_distance,
                             replan_stride=int(planner.get("replan_stride", 1)))


@dataclass(eq=False)
class TrialResult:
    seed: int
    user_errors: np.ndarray
    uav_rmse: float
    classification_error: float
    params: ChannelParams = None
    converged: bool = True
    runtime: float = 0.0
    failure: str = None
    artifacts: dict = field(default=None, repr=False)

    @property
    def ok(self):
        return self.failure is None

    def __eq__(self, other):
        # runtime and artifacts are not part of the result
        if not isinstance(other, TrialResult):
            return NotImplemented
        return (self.seed == other.seed and self.failure == other.failure
                and np.array_equal(self.user_errors, other.user_errors)
                and np.array_equal([self.uav_rmse, self.classification_error],
                                   [other.uav_rmse, other.classification_error], equal_nan=True)
                and self.params == other.params and self.converged == other.converged)

    @classmethod
    def failed(cls, seed, message):
        return cls(seed=seed, user_errors=np.zeros(0), uav_rmse=float("nan"),
                   classification_error=float("nan"), converged=False, failure=message)


def _trial_seeds(seed):
    city, users, measurements = np.random.SeedSequence(seed).spawn(3)
    return city, users, measurements


def run_trial(scenario, seed, keep_artifacts=False):
    """
    One Monte-Carlo trial: city, users, mission (or fixed rectangle, or BSs alone), estimation, metrics
    :param scenario: Scenario
    :param seed: trial seed; all randomness of the trial derives from it
    :param keep_artifacts: attach the map, measurements and mission record to the result
    :return: TrialResult
    """
    start = time.perf_counter()
    city_seed, user_seed, measurement_seed = _trial_seeds(seed)
    urban_map = scenario.build_map(city_seed)
    users = scenario.place_users(urban_map, np.random.default_rng(user_seed))
    rng = np.random.default_rng(measurement_seed)
    artifacts = {"map": urban_map, "users": users}

    if scenario.planner_mode is PlannerMode.OPTIMIZED:
        record = run_mission_online(urban_map, users, scenario.channel, scenario.noise, scenario.predictor,
                                    scenario.planner_config(urban_map.area), scenario.algorithm, rng,
                                    params_prior=scenario.prior)
        if record.result is None or record.result.state.n_uav != len(record.trajectory):
            raise SolverError(f"Final estimation of the mission failed: {record.failures}")
        result, measurements, trajectory = record.result, record.measurements, record.trajectory
        artifacts["mission"] = record
    else:
        if scenario.planner_mode is PlannerMode.RANDOM_RECTANGLE:
            trajectory = rectangle_trajectory(urban_map.area.centroid, scenario.budget, scenario.n_epochs,
                                              scenario.raw["uav"]["start"][2])
        else:
            trajectory = np.zeros((0, 3))
        measurements = collect_mission(urban_map, scenario.channel, scenario.noise, trajectory, users, rng)
        result = run_algorithm1(measurements, urban_map, scenario.prior, scenario.noise, scenario.algorithm)
    artifacts["measurements"] = measurements
    artifacts["result"] = result

    user_errors = np.linalg.norm(result.state.users - users, axis=1)
    if len(trajectory):
        uav_rmse = float(np.sqrt(np.mean(np.sum((result.state.uav - trajectory[:, :2]) ** 2, axis=1))))
    else:
        uav_rmse = float("nan")
    class_error = classification_error(result.classification.pooled_labels(), measurements.pooled("true_los"))
    runtime = time.perf_counter() - start
    logger.info(f"Trial {seed}: mean user error {np.mean(user_errors):.2f} m, UAV RMSE {uav_rmse:.2f} m, "
                f"classification error {class_error:.4f}, {runtime:.1f} s")
    return TrialResult(seed=seed, user_errors=user_errors, uav_rmse=uav_rmse, classification_error=class_error,
                       params=result.params, converged=result.converged, runtime=runtime,
                       artifacts=artifacts if keep_artifacts else None)


def _run_trial_isolated(scenario, seed):
    try:
        return run_trial(scenario, seed)
    except Exception as ex:
        logger.error(f"Trial {seed} failed: {ex}")
        return TrialResult.failed(seed, f"{type(ex).__name__}: {ex}")


@dataclass(eq=False)
class BatchReport:
    scenario: Scenario
    seeds: list
    trials: list

    @property
    def successful(self):
        return [trial for trial in self.trials if trial.ok]

    @property
    def failures(self):
        return [trial for trial in self.trials if not trial.ok]

    def pooled_errors(self):
        if not self.successful:
            return np.zeros(0)
        return np.concatenate([trial.user_errors for trial in self.successful])

    @property
    def rmse(self):
        errors = self.pooled_errors()
        return float(np.sqrt(np.mean(errors ** 2))) if errors.size else float("nan")

    @property
    def median_error(self):
        errors = self.pooled_errors()
        return float(np.median(errors)) if errors.size else float("nan")

    @property
    def mean_error(self):
        errors = self.pooled_errors()
        return float(np.mean(errors)) if errors.size else float("nan")

    @property
    def uav_rmse(self):
        values = np.array([trial.uav_rmse for trial in self.successful], dtype=float)
        values = values[np.isfinite(values)]
        return float(np.sqrt(np.mean(values ** 2))) if values.size else float("nan")

    @property
    def classification_error(self):
        values = [trial.classification_error for trial in self.successful]
        return float(np.mean(values)) if values else float("nan")

    def cdf(self):
        errors = np.sort(self.pooled_errors())
        fraction = np.arange(1, len(errors) + 1) / len(errors) if len(errors) else np.zeros(0)
        return pd.DataFrame({"error": errors, "fraction": fraction})

    def trial_frame(self):
        rows = []
        for trial in self.trials:
            base = {"seed": trial.seed, "uav_rmse": trial.uav_rmse,
                    "classification_error": trial.classification_error, "converged": trial.converged,
                    "runtime": trial.runtime, "failure": trial.failure or ""}
            if not trial.ok:
                rows.append(dict(base, user=-1, error=float("nan")))
            for k, error in enumerate(trial.user_errors):
                rows.append(dict(base, user=k, error=float(error)))
        return pd.DataFrame(rows, columns=TRIAL_COLUMNS)

    def aggregates(self):
        return {"n_trials": len(self.trials), "n_failed": len(self.failures), "rmse": self.rmse,
                "median_error": self.median_error, "mean_error": self.mean_error, "uav_rmse": self.uav_rmse,
                "classification_error": self.classification_error}

    def summary(self):
        return {"scenario": self.scenario.to_dict(), "seeds": [int(seed) for seed in self.seeds],
                "results": self.aggregates(),
                "failures": [{"seed": int(trial.seed), "error": trial.failure} for trial in self.failures]}


@log_call
def run_batch(scenario, n_trials=None, seeds=None, workers=1):
    """
    Run independent trials and aggregate them.

    Args:
        scenario (Scenario): the experiment.
        n_trials (int, optional): number of trials; seeds default to scenario.seed + 0..n_trials-1.
        seeds (list, optional): explicit trial seeds.
        workers (int): parallel worker processes; results do not depend on it.

    Returns:
        BatchReport: trials sorted by seed. A failed trial is recorded, it does not abort the batch.
    """
    if seeds is None:
        if n_trials is None or n_trials < 1:
            raise ValueError(f"n_trials must be at least 1, got {n_trials}")
        seeds = [scenario.seed + i for i in range(n_trials)]
    seeds = [int(seed) for seed in seeds]
    if workers > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            trials = list(pool.map(_run_trial_isolated, [scenario] * len(seeds), seeds))
    else:
        trials = [_run_trial_isolated(scenario, seed) for seed in seeds]
    trials.sort(key=lambda trial: trial.seed)
    report = BatchReport(scenario=scenario, seeds=sorted(seeds), trials=trials)
    logger.info(f"Batch of {len(trials)} trials: RMSE {report.rmse:.2f} m, median {report.median_error:.2f} m, "
                f"{len(report.failures)} failed")
    return report


def emit_results(report, out_dir):
    """
    Write trials.csv (one row per trial and user), cdf.csv and summary.yaml (config echo, seeds, aggregates)
    :param report: BatchReport
    :param out_dir: output directory
    :return: dict of written paths
    """
    paths = {"trials": os.path.join(out_dir, TRIALS_FILE), "cdf": os.path.join(out_dir, CDF_FILE),
             "summary": os.path.join(out_dir, SUMMARY_FILE)}
    write_table(report.trial_frame(), paths["trials"])
    write_table(report.cdf(), paths["cdf"])
    write_yaml_file(report.summary(), paths["summary"])
    logger.info(f"Results written to {out_dir}")
    return paths


@log_call
def replay(summary_path, out_dir, workers=1):
    """Re-run the batch echoed in a summary.yaml and write its results again."""
    summary = read_yaml_file(summary_path)
    if "scenario" not in summary or "seeds" not in summary:
        raise ValueError(f"{summary_path} is not a batch summary (needs 'scenario' and 'seeds')")
    scenario = Scenario.from_dict(summary["scenario"])
    report = run_batch(scenario, seeds=summary["seeds"], workers=workers)
    emit_results(report, out_dir)
    return report


@log_call
def run_bench(scenario, seeds, workers=1, budget=None, pipelines=None):
    """
    Run the comparison pipelines on the same seeds
    :return: (dict name -> BatchReport, comparison DataFrame)
    """
    reports = {}
    for name in pipelines or BENCH_PIPELINES:
        if name not in BENCH_PIPELINES:
            raise ValueError(f"Invalid pipeline {name}. Must be one of the following: {list(BENCH_PIPELINES)}")
        planner_mode, estimator_mode = BENCH_PIPELINES[name]
        overrides = {"planner": {"mode": planner_mode.value}, "estimator": {"mode": estimator_mode.value}}
        if budget is not None:
            overrides["uav"] = {"budget": float(budget)}
        reports[name] = run_batch(scenario.with_overrides(overrides), seeds=seeds, workers=workers)
    rows = [dict(pipeline=name, **report.aggregates()) for name, report in reports.items()]
    return reports, pd.DataFrame(rows)


@log_call
def sweep_budgets(scenario, budgets, seeds, workers=1):
    """RMSE of the scenario's pipeline for each trajectory budget."""
    rows = []
    for budget in budgets:
        report = run_batch(scenario.with_overrides({"uav": {"budget": float(budget)}}), seeds=seeds, workers=workers)
        rows.append(dict(budget=float(budget), **report.aggregates()))
    return pd.DataFrame(rows)
