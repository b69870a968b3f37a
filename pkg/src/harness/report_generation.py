"""
Report generation for the polaron lab.

This module handles:
1. One CSV table per experiment, one row per parameter value
2. One JSON summary per experiment (fits, extrapolations, error bars, checks)
3. The run index listing every emitted file
"""

import csv
import json
import logging
import math
from pathlib import Path
from typing import Any, Dict, List, Mapping, Sequence, Union

import numpy as np

from harness.analysis import ConvergenceReport

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def to_jsonable(value: Any) -> Any:
    """numpy scalars and arrays as plain Python; non-finite floats as strings."""
    if isinstance(value, Mapping):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isfinite(value):
            return value
        return str(value)
    if isinstance(value, complex):
        return {"real": value.real, "imag": value.imag}
    return value


def _columns(rows: Sequence[Mapping[str, Any]]) -> List[str]:
    columns: List[str] = []
    for row in rows:
        for key in row:
            if key not in columns:
                columns.append(key)
    return columns


def _cell(value: Any) -> Any:
    value = to_jsonable(value)
    if isinstance(value, (list, dict)):
        return json.dumps(value, sort_keys=True)
    return value


def save_table(rows: Sequence[Mapping[str, Any]], file_path: PathLike) -> Path:
    """Write rows as CSV; nested values are JSON-encoded in their cell."""
    target = Path(file_path)
    target.parent.mkdir(parents=True, exist_ok=True)
    columns = _columns(rows)
    with open(target, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns, restval="")
        writer.writeheader()
        for row in rows:
            writer.writerow({key: _cell(value) for key, value in row.items()})
    logger.info("wrote table %s (%d rows)", target, len(rows))
    return target


def save_report_to_file(report: Mapping[str, Any], file_path: PathLike) -> Path:
    """Save a report dictionary as JSON."""
    target = Path(file_path)
    target.parent.mkdir(parents=True, exist_ok=True)
    with open(target, "w") as f:
        json.dump(to_jsonable(report), f, indent=2, sort_keys=True)
    logger.info("wrote summary %s", target)
    return target


def save_report(report: ConvergenceReport, output_dir: PathLike) -> Dict[str, str]:
    """
    Emit the CSV table and the JSON summary of one experiment.

    Returns:
        Mapping of ``table`` and ``summary`` to the written paths
    """
    directory = Path(output_dir)
    table = save_table(report.rows, directory / f"{report.name}.csv")
    summary = save_report_to_file(report.to_dict(), directory / f"{report.name}.json")
    return {"table": str(table), "summary": str(summary)}


def save_status(name: str, payload: Mapping[str, Any], output_dir: PathLike) -> Dict[str, str]:
    """JSON summary of an experiment that ended without a table (error or no binding)."""
    summary = save_report_to_file({"name": name, **payload}, Path(output_dir) / f"{name}.json")
    return {"summary": str(summary)}


def save_index(files: Mapping[str, Mapping[str, str]], config: Mapping[str, Any], output_dir: PathLike) -> Path:
    """The run index: configuration and the files of every experiment."""
    return save_report_to_file({"config": config, "files": files}, Path(output_dir) / "index.json")
