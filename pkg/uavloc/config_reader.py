import copy
import logging
import os
from functools import cache

import importlib_resources as resources

from uavloc.utils.io_utils import read_yaml_file, read_yaml_text

logger = logging.getLogger(__name__)

DEFAULT_SCENARIO = "default.yaml"
SCENARIO_SECTIONS = ("city", "bs", "users", "uav", "channel", "prior", "odometry", "los_predictor",
                     "planner", "estimator", "em", "solver", "algorithm")


def _get_scenario_path():
    path = os.environ.get("UAVLOC_SCENARIO", None)
    if not path:
        logger.debug("No scenario defined in env var UAVLOC_SCENARIO; using the shipped default.")
    return path


def _get_output_dir():
    output_dir = os.environ.get("UAVLOC_OUTPUT_DIR", None)
    if not output_dir:
        logger.debug("No output directory defined in env var UAVLOC_OUTPUT_DIR; defaulting to 'results'.")
        output_dir = "results"
    return output_dir


def _get_workers():
    workers = os.environ.get("UAVLOC_WORKERS", "1")
    try:
        workers = int(workers)
    except ValueError:
        raise ValueError(f"UAVLOC_WORKERS must be an integer, got {workers!r}")
    if workers < 1:
        raise ValueError(f"UAVLOC_WORKERS must be at least 1, got {workers}")
    return workers


def _get_log_level():
    return os.environ.get("UAVLOC_LOG_LEVEL", "INFO").upper()


@cache
def _get_default_scenario_text():
    return resources.files("uavloc.scenarios").joinpath(DEFAULT_SCENARIO).read_text()


def default_scenario():
    """Return a fresh copy of the shipped default scenario as a dict."""
    return read_yaml_text(_get_default_scenario_text())


def merge_scenario(base, overrides):
    """
    Deep-merge a partial scenario over a complete one
    :param base: complete scenario dict, left untouched
    :param overrides: partial scenario dict; nested sections merge key by key
    :return: merged scenario dict
    """
    merged = copy.deepcopy(base)
    for key, value in (overrides or {}).items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = merge_scenario(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def validate_scenario_dict(scenario):
    unknown = sorted(set(scenario) - set(SCENARIO_SECTIONS) - {"seed"})
    if unknown:
        raise ValueError("Unknown scenario section(s): {}. Must be one of the following: {}".format(
            ", ".join(unknown), ", ".join(SCENARIO_SECTIONS)))
    for section in SCENARIO_SECTIONS:
        if not isinstance(scenario.get(section), dict):
            raise ValueError(f"Scenario section '{section}' is missing or is not a mapping")
    return scenario


def load_scenario(path=None):
    """
    Load a scenario file layered over the shipped default.

    Args:
        path (str, optional): scenario YAML. Falls back to UAVLOC_SCENARIO, then the default.

    Returns:
        dict: the complete, validated scenario.

    Raises:
        ValueError: If the merged scenario has unknown or malformed sections.
        OSError: If the scenario file cannot be read.
    """
    path = path or _get_scenario_path()
    scenario = default_scenario()
    if path:
        logger.debug(f"Loading scenario from {path}")
        scenario = merge_scenario(scenario, read_yaml_file(path))
    return validate_scenario_dict(scenario)


class UavlocConfig:
    def __init__(self, scenario_path=None):
        self.scenario_path = scenario_path or _get_scenario_path()
        self.output_dir = _get_output_dir()
        self.workers = _get_workers()
        self.log_level = _get_log_level()
        self.scenario = load_scenario(self.scenario_path)

    def get(self, section, key, default=None):
        return self.scenario.get(section, {}).get(key, default)
