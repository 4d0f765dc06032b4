"""
Monte-Carlo experiments on the full dense-urban scenario. They take minutes; run with

    UAVLOC_RUN_SLOW=1 pytest -m slow
"""
import logging
import os
import time

import numpy as np
import pytest

from uavloc.config_reader import default_scenario
from uavloc.harness import Scenario, run_batch, run_bench, sweep_budgets

logger = logging.getLogger(__name__)

SEEDS = list(range(1, 21))
WORKERS = int(os.environ.get("UAVLOC_WORKERS", "4"))

pytestmark = [
    pytest.mark.slow,
    pytest.mark.skipif(os.environ.get("UAVLOC_RUN_SLOW") != "1", reason="set UAVLOC_RUN_SLOW=1 to run"),
]


@pytest.fixture(scope="module")
def scenario():
    return Scenario.from_dict(default_scenario())


@pytest.fixture(scope="module")
def full_batch(scenario):
    start = time.perf_counter()
    report = run_batch(scenario, seeds=SEEDS, workers=WORKERS)
    return report, time.perf_counter() - start


def test_classification_accuracy(full_batch):
    report, elapsed = full_batch
    assert not report.failures
    assert report.classification_error <= 0.01
    logger.info(f"20 trials in {elapsed:.0f} s")
    assert elapsed < 300.0


def test_localization_accuracy(full_batch):
    report, _ = full_batch
    assert report.mean_error <= 3.0


def test_benchmark_ordering(scenario):
    reports, _ = run_bench(scenario, SEEDS, workers=WORKERS, budget=800.0,
                           pipelines=["proposed", "rss-only", "bs-only"])
    proposed, rss_only, bs_only = (reports[name] for name in ("proposed", "rss-only", "bs-only"))
    assert proposed.median_error < rss_only.median_error < bs_only.median_error
    assert proposed.uav_rmse < proposed.rmse


def test_optimized_beats_rectangle(scenario):
    reports, _ = run_bench(scenario, SEEDS, workers=WORKERS, budget=800.0, pipelines=["proposed", "rectangle"])
    assert reports["proposed"].median_error < reports["rectangle"].median_error


def test_rmse_falls_with_budget(scenario):
    sweep = sweep_budgets(scenario, [400.0, 600.0, 800.0, 1000.0], SEEDS, workers=WORKERS)
    rmse = sweep["rmse"].to_numpy()
    rises = np.flatnonzero(rmse[1:] >= rmse[:-1])
    assert len(rises) <= 1
    for i in rises:
        assert rmse[i + 1] <= 1.05 * rmse[i]
