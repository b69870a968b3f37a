"""
Analysis helpers for the limit experiments.

This module handles:
1. The convergence report shared by every experiment
2. Order fits and m -> 0 extrapolations of report columns
3. Finite-size error bars and distances between macroscopic states
"""

import logging
import platform
import time
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np

from lattice_core.lattice import PlaneWaveBasis, grid_integral
from utils.errors import FitFailure
from utils.fitting import extrapolate_to_zero, fit_order

logger = logging.getLogger(__name__)

MIN_FIT_POINTS = 3


@dataclass
class ConvergenceReport:
    """Rows indexed by m (descending) with fits, extrapolations and error bars."""

    name: str
    param: str = "m"
    ordered: bool = True
    rows: List[Dict[str, Any]] = field(default_factory=list)
    fits: Dict[str, Any] = field(default_factory=dict)
    extrapolation: Dict[str, Any] = field(default_factory=dict)
    error_bars: Dict[str, Any] = field(default_factory=dict)
    checks: Dict[str, Any] = field(default_factory=dict)
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.metadata.setdefault("started", time.time())

    def add_row(self, row: Dict[str, Any]) -> None:
        self.rows.append(row)
        if self.ordered:
            self.rows.sort(key=lambda r: -float(r.get(self.param, 0.0)))

    def column(self, key: str, rows: Optional[List[Dict[str, Any]]] = None) -> List[float]:
        return [float(r[key]) for r in (rows if rows is not None else self.rows)]

    def _usable(self, key: str) -> List[Dict[str, Any]]:
        return [r for r in self.rows if r.get("status", "success") == "success" and key in r]

    def add_fit(self, key: str, param: Optional[str] = None) -> Dict[str, Any]:
        """Log-log order of |column| in the parameter; needs >= 3 usable rows."""
        rows = self._usable(key)
        param = param or self.param
        if len(rows) < MIN_FIT_POINTS:
            result: Dict[str, Any] = {"skipped": f"{len(rows)} usable rows, need {MIN_FIT_POINTS}"}
        else:
            try:
                result = fit_order(self.column(param, rows), self.column(key, rows), floor=1e-14)
            except FitFailure as exc:
                result = {"skipped": str(exc)}
        self.fits[key] = result
        return result

    def add_extrapolation(self, key: str, param: Optional[str] = None, degree: int = 1) -> Dict[str, Any]:
        """Polynomial extrapolation of a column to m = 0."""
        rows = self._usable(key)
        param = param or self.param
        try:
            result = extrapolate_to_zero(self.column(param, rows), self.column(key, rows), degree)
        except FitFailure as exc:
            result = {"skipped": str(exc)}
        self.extrapolation[key] = result
        return result

    def finish(self) -> "ConvergenceReport":
        self.metadata["runtime_seconds"] = time.time() - self.metadata["started"]
        self.metadata["python"] = platform.python_version()
        self.metadata["numpy"] = np.__version__
        return self

    def to_dict(self) -> Dict[str, Any]:
        return {
            "status": "success",
            "name": self.name,
            "param": self.param,
            "rows": self.rows,
            "fits": self.fits,
            "extrapolation": self.extrapolation,
            "error_bars": self.error_bars,
            "checks": self.checks,
            "metadata": self.metadata,
        }


def finite_size_error(primary: float, secondary: float) -> float:
    """Error bar of a supercell quantity from two supercell sizes."""
    return abs(float(primary) - float(secondary))


def density_distance(a: np.ndarray, b: np.ndarray, grid: PlaneWaveBasis) -> float:
    """L1 distance between |a|^2 and |b|^2."""
    return grid_integral(np.abs(np.abs(a) ** 2 - np.abs(b) ** 2), grid)


def state_distance(a: np.ndarray, b: np.ndarray, grid: PlaneWaveBasis) -> float:
    """L2 distance between two real states, up to a global sign."""
    plus = grid_integral(np.abs(a - b) ** 2, grid)
    minus = grid_integral(np.abs(a + b) ** 2, grid)
    return float(np.sqrt(min(plus, minus)))


def decreasing(values: List[float], slack: float = 0.0) -> bool:
    """True when the sequence never increases by more than ``slack``."""
    return all(b <= a + slack for a, b in zip(values, values[1:]))
