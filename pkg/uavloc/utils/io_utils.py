import logging
import os
from enum import Enum

import pandas as pd
from yaml import load as yaml_load, dump as yaml_dump
try:
    from yaml import CLoader as Loader, CDumper as Dumper
except ImportError:
    from yaml import Loader, Dumper


logger = logging.getLogger(__name__)


def read_yaml_file(path):
    try:
        with open(path, 'r') as fr:
            return yaml_load(fr, Loader=Loader) or {}
    except OSError as ex:
        raise OSError(f"Unable to read YAML file {path}: {ex}") from ex


def read_yaml_text(text):
    return yaml_load(text, Loader=Loader) or {}


def dump_yaml_text(data):
    # sort_keys keeps the output byte-identical for equal content
    return yaml_dump(data, Dumper=Dumper, sort_keys=True, default_flow_style=False)


def write_yaml_file(data, path):
    ensure_parent_dir(path)
    try:
        with open(path, 'w') as fw:
            fw.write(dump_yaml_text(to_builtin(data)))
    except OSError as ex:
        raise OSError(f"Unable to write YAML file {path}: {ex}") from ex
    logger.debug(f"Wrote {path}")
    return path


def write_table(frame, path):
    """
    Write a pandas DataFrame as CSV, surfacing I/O errors with the path
    :param frame: DataFrame to write (may be empty, header is still written)
    :param path: destination file
    :return: the path written
    """
    ensure_parent_dir(path)
    try:
        frame.to_csv(path, index=False, float_format='%.17g')
    except OSError as ex:
        raise OSError(f"Unable to write table {path}: {ex}") from ex
    logger.debug(f"Wrote {len(frame)} rows to {path}")
    return path



def read_table(path):
    """Read a CSV written by write_table; floats parse back to the exact values written"""
    try:
        return pd.read_csv(path, float_precision="round_trip")
    except OSError as ex:
        raise OSError(f"Unable to read table {path}: {ex}") from ex

def ensure_parent_dir(path):
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def to_builtin(value):
    """Convert numpy scalars/arrays nested in dicts and lists to plain Python for YAML."""
    if isinstance(value, dict):
        return {str(k): to_builtin(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_builtin(v) for v in value]
    if hasattr(value, 'tolist'):
        return value.tolist()
    if isinstance(value, Enum):
        return value.value
    return value
