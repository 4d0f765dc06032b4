import logging
import os
import tempfile
from unittest import TestCase
from unittest.mock import patch

import numpy as np
import pandas as pd
import pytest

from uavloc.config_reader import default_scenario, merge_scenario
from uavloc.harness import (CDF_FILE, SUMMARY_FILE, TRIAL_COLUMNS, TRIALS_FILE, BatchReport, Scenario, TrialResult,
                            emit_results, replay, run_batch, run_bench, run_trial, sweep_budgets)
from uavloc.utils.io_utils import read_yaml_file
from uavloc.utils.modes import EstimatorMode, PlannerMode

SMALL = {
    "city": {"n_buildings": 30},
    "users": {"count": 2},
    "uav": {"budget": 200.0, "n_epochs": 10},
    "planner": {"mode": "random-rectangle"},
    "em": {"max_iters": 30},
    "algorithm": {"max_outer_iters": 3, "grid_step": 20.0},
}


def _small():
    return Scenario.from_dict(merge_scenario(default_scenario(), SMALL))


def _trial(seed, errors, uav_rmse=1.0, runtime=0.5):
    return TrialResult(seed=seed, user_errors=np.asarray(errors, dtype=float), uav_rmse=uav_rmse,
                       classification_error=0.1, runtime=runtime)


def test_default_scenario():
    scenario = Scenario.from_dict(default_scenario())
    assert scenario.d_max == pytest.approx(10.0)
    assert scenario.planner_mode is PlannerMode.OPTIMIZED
    assert scenario.estimator_mode is EstimatorMode.FULL
    assert scenario.algorithm.mode is EstimatorMode.FULL
    assert len(scenario.bs_sites) == 3
    assert scenario.channel.los.sigma == pytest.approx(np.sqrt(2.0))
    assert scenario.noise.sigma_gps == pytest.approx(np.sqrt(5.0))


def test_estimator_prior_is_not_the_synthesis_channel():
    scenario = Scenario.from_dict(default_scenario())
    assert scenario.prior != scenario.channel
    assert scenario.prior.los.alpha == pytest.approx(-20.0)
    assert scenario.prior.nlos.sigma == pytest.approx(3.0)


def test_estimator_receives_the_prior():
    scenario = _small()
    with patch("uavloc.harness.run_algorithm1", side_effect=RuntimeError("stop")) as estimator:
        with pytest.raises(RuntimeError):
            run_trial(scenario, 1)
    assert estimator.call_args.args[2] == scenario.prior
    assert estimator.call_args.args[2] != scenario.channel


def test_mission_receives_the_prior():
    scenario = _small().with_overrides({"planner": {"mode": "optimized"}})
    with patch("uavloc.harness.run_mission_online", side_effect=RuntimeError("stop")) as mission:
        with pytest.raises(RuntimeError):
            run_trial(scenario, 1)
    assert mission.call_args.args[2] == scenario.channel
    assert mission.call_args.kwargs["params_prior"] == scenario.prior


def test_bs_only_scenario_uses_four_sites():
    scenario = Scenario.from_dict(merge_scenario(default_scenario(), {"planner": {"mode": "static-bs-only"}}))
    assert len(scenario.bs_sites) == 4
    urban_map = scenario.build_map(np.random.SeedSequence(3))
    assert len(urban_map.bs_sites) == 4


def test_invalid_scenarios():
    with pytest.raises(ValueError, match="Must be one of the following"):
        Scenario.from_dict(merge_scenario(default_scenario(), {"planner": {"mode": "spiral"}}))
    with pytest.raises(ValueError):
        Scenario.from_dict(merge_scenario(default_scenario(), {"uav": {"budget": 0.0}}))
    with pytest.raises(ValueError):
        Scenario.from_dict(merge_scenario(default_scenario(), {"users": {"count": 0}}))
    broken = default_scenario()
    del broken["channel"]
    with pytest.raises(ValueError):
        Scenario.from_dict(broken)


def test_with_overrides_leaves_original():
    scenario = _small()
    other = scenario.with_overrides({"uav": {"budget": 400.0}})
    assert other.d_max == pytest.approx(40.0)
    assert scenario.d_max == pytest.approx(20.0)
    assert scenario.to_dict()["uav"]["budget"] == 200.0


def test_fixed_users_and_map_seed():
    scenario = _small().with_overrides({"users": {"positions": [[120.0, 80.0]]}, "city": {"seed": 4}})
    urban_map = scenario.build_map(np.random.SeedSequence(1))
    assert urban_map == scenario.build_map(np.random.SeedSequence(2))
    np.testing.assert_array_equal(scenario.place_users(urban_map, np.random.default_rng(0)), [[120.0, 80.0]])


def test_trial_equality_ignores_runtime():
    assert _trial(1, [1.0, 2.0], runtime=0.1) == _trial(1, [1.0, 2.0], runtime=9.0)
    assert _trial(1, [1.0, 2.0]) != _trial(1, [1.0, 2.5])
    assert _trial(1, [1.0], uav_rmse=float("nan")) == _trial(1, [1.0], uav_rmse=float("nan"))


def test_report_aggregates():
    trials = [_trial(1, [3.0, 4.0], uav_rmse=float("nan")), _trial(2, [0.0], uav_rmse=2.0),
              TrialResult.failed(3, "SolverError: boom")]
    report = BatchReport(scenario=_small(), seeds=[1, 2, 3], trials=trials)
    assert len(report.successful) == 2 and len(report.failures) == 1
    assert report.rmse == pytest.approx(np.sqrt(25.0 / 3.0))
    assert report.median_error == pytest.approx(3.0)
    assert report.mean_error == pytest.approx(7.0 / 3.0)
    assert report.uav_rmse == pytest.approx(2.0)
    cdf = report.cdf()
    np.testing.assert_allclose(cdf["error"], [0.0, 3.0, 4.0])
    np.testing.assert_allclose(cdf["fraction"], [1 / 3, 2 / 3, 1.0])
    frame = report.trial_frame()
    assert list(frame.columns) == TRIAL_COLUMNS
    assert len(frame) == 4
    assert frame.loc[frame["seed"] == 3, "user"].tolist() == [-1]
    summary = report.summary()
    assert summary["seeds"] == [1, 2, 3]
    assert summary["failures"] == [{"seed": 3, "error": "SolverError: boom"}]


def test_empty_report_writes_headers(tmp_path):
    report = BatchReport(scenario=_small(), seeds=[], trials=[])
    paths = emit_results(report, str(tmp_path))
    assert list(pd.read_csv(paths["cdf"]).columns) == ["error", "fraction"]
    assert len(pd.read_csv(paths["trials"])) == 0
    assert np.isnan(read_yaml_file(paths["summary"])["results"]["rmse"])


def test_run_batch_needs_trials():
    with pytest.raises(ValueError):
        run_batch(_small(), n_trials=0)


def test_bench_rejects_unknown_pipeline():
    with pytest.raises(ValueError, match="Must be one of the following"):
        run_bench(_small(), seeds=[1], pipelines=["teleport"])


class TestBatch(TestCase):
    logging.basicConfig(level=logging.DEBUG)
    logger = logging.getLogger(__name__)

    @classmethod
    def setUpClass(cls):
        cls.scenario = _small()
        cls.report = run_batch(cls.scenario, seeds=[2, 1])

    def test_trials_sorted_and_complete(self):
        self.assertEqual([1, 2], [trial.seed for trial in self.report.trials])
        self.assertEqual([1, 2], self.report.seeds)
        for trial in self.report.trials:
            self.assertTrue(trial.ok, trial.failure)
            self.assertEqual(2, len(trial.user_errors))
            self.assertTrue(np.isfinite(trial.uav_rmse))
            self.assertTrue(0.0 <= trial.classification_error <= 1.0)

    def test_same_seeds_same_results(self):
        again = run_batch(self.scenario, seeds=[1, 2])
        self.assertEqual(self.report.trials, again.trials)

    def test_results_do_not_depend_on_workers(self):
        parallel = run_batch(self.scenario, seeds=[1, 2], workers=2)
        self.assertEqual(self.report.trials, parallel.trials)

    def test_replay_reproduces_outputs(self):
        with tempfile.TemporaryDirectory() as first, tempfile.TemporaryDirectory() as second:
            paths = emit_results(self.report, first)
            replay(paths["summary"], second)
            for name in (SUMMARY_FILE, CDF_FILE):
                with open(os.path.join(first, name)) as a, open(os.path.join(second, name)) as b:
                    self.assertEqual(a.read(), b.read())
            self.assertTrue(os.path.exists(os.path.join(second, TRIALS_FILE)))

    def test_replay_rejects_other_yaml(self):
        with tempfile.TemporaryDirectory() as out:
            path = os.path.join(out, "other.yaml")
            with open(path, "w") as fw:
                fw.write("seed: 1\n")
            with self.assertRaises(ValueError):
                replay(path, out)

    def test_run_trial_keeps_artifacts(self):
        trial = run_trial(self.scenario, 1, keep_artifacts=True)
        self.assertEqual(self.report.trials[0], trial)
        self.assertEqual(10, trial.artifacts["measurements"].n_epochs)
        self.assertEqual((2, 2), trial.artifacts["users"].shape)


def test_bench_and_sweep_smoke():
    scenario = _small()
    reports, comparison = run_bench(scenario, seeds=[5], pipelines=["rectangle", "bs-only"])
    assert list(comparison["pipeline"]) == ["rectangle", "bs-only"]
    assert all(report.aggregates()["n_trials"] == 1 for report in reports.values())
    assert reports["bs-only"].scenario.planner_mode is PlannerMode.STATIC_BS_ONLY
    sweep = sweep_budgets(scenario, [100.0, 200.0], seeds=[5])
    assert list(sweep["budget"]) == [100.0, 200.0]
    assert "rmse" in sweep.columns
