import os
import tempfile
from unittest import TestCase
from unittest.mock import patch
import logging

from uavloc import config_reader
from uavloc.config_reader import UavlocConfig, default_scenario, load_scenario, merge_scenario
from uavloc.utils.io_utils import write_yaml_file


class TestConfig(TestCase):
    logging.basicConfig(level=logging.DEBUG)
    logger = logging.getLogger(__name__)

    def test_output_dir_defaults_to_results(self):
        with patch.dict(os.environ, {}, clear=True):
            self.assertEqual("results", config_reader._get_output_dir())
        with patch.dict(os.environ, {"UAVLOC_OUTPUT_DIR": "/tmp/out"}):
            self.assertEqual("/tmp/out", config_reader._get_output_dir())

    def test_workers_from_env(self):
        with patch.dict(os.environ, {"UAVLOC_WORKERS": "4"}):
            self.assertEqual(4, config_reader._get_workers())
        with patch.dict(os.environ, {"UAVLOC_WORKERS": "many"}):
            with self.assertRaises(ValueError):
                config_reader._get_workers()
        with patch.dict(os.environ, {"UAVLOC_WORKERS": "0"}):
            with self.assertRaises(ValueError):
                config_reader._get_workers()

    def test_log_level_is_upper_case(self):
        with patch.dict(os.environ, {"UAVLOC_LOG_LEVEL": "debug"}):
            self.assertEqual("DEBUG", config_reader._get_log_level())

    def test_default_scenario_is_a_fresh_copy(self):
        first = default_scenario()
        first["uav"]["budget"] = -1.0
        self.assertEqual(1000.0, default_scenario()["uav"]["budget"])
        self.assertEqual(100, default_scenario()["uav"]["n_epochs"])

    def test_merge_is_deep(self):
        base = {"channel": {"los": {"alpha": -22.0, "beta": -32.0}, "pi_los": 0.5}, "seed": 1}
        merged = merge_scenario(base, {"channel": {"los": {"alpha": -20.0}}, "seed": 9})
        self.assertEqual({"channel": {"los": {"alpha": -20.0, "beta": -32.0}, "pi_los": 0.5}, "seed": 9}, merged)
        self.assertEqual(-22.0, base["channel"]["los"]["alpha"])

    def test_load_scenario_layers_over_default(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = write_yaml_file({"users": {"count": 3}}, os.path.join(tmp, "scenario.yaml"))
            scenario = load_scenario(path)
            self.assertEqual(3, scenario["users"]["count"])
            self.assertEqual(80, scenario["city"]["n_buildings"])
            with patch.dict(os.environ, {"UAVLOC_SCENARIO": path}):
                self.assertEqual(3, UavlocConfig().scenario["users"]["count"])

    def test_unknown_section_raises(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = write_yaml_file({"weather": {"rain": True}}, os.path.join(tmp, "scenario.yaml"))
            with self.assertRaises(ValueError) as ctx:
                load_scenario(path)
            self.assertIn("Must be one of the following", str(ctx.exception))

    def test_missing_scenario_file(self):
        with self.assertRaises(OSError):
            load_scenario("/nonexistent/scenario.yaml")

    def test_config_get(self):
        with patch.dict(os.environ, {}, clear=True):
            config = UavlocConfig()
        self.assertEqual(1, config.workers)
        self.assertEqual("optimized", config.get("planner", "mode"))
        self.assertIsNone(config.get("planner", "missing"))
        self.assertEqual("x", config.get("nothing", "missing", "x"))
