"""
Experiment configuration for the polaron lab.

This module handles:
1. The validated configuration schema (pydantic models)
2. Loading YAML files and environment overrides (python-dotenv)
3. Consistency checks between the m list and integer supercells
"""

import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from utils.errors import ConfigError

logger = logging.getLogger(__name__)

OUTPUT_DIR_ENV = "POLARON_LAB_OUTPUT_DIR"
LOG_LEVEL_ENV = "POLARON_LAB_LOG_LEVEL"

EpsSpec = Union[str, float, List[float], List[List[float]]]


def integer_ratio(value: float, tol: float = 1e-9) -> Optional[int]:
    """value as an integer if it is one within tol, else None."""
    rounded = int(round(value))
    if rounded >= 1 and abs(value - rounded) <= tol * max(1.0, abs(value)):
        return rounded
    return None


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SiteConfig(_Section):
    """One Gaussian nucleus, position in fractional coordinates."""

    position: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    charge: float = 1.0
    width: float = Field(0.3, gt=0)


class CrystalConfig(_Section):
    kind: Literal["gaussian_sites", "model_potential"] = "model_potential"
    lattice_constant: float = Field(2.0, gt=0)
    lattice_c: Optional[float] = Field(None, gt=0)
    ecut: float = Field(15.0, gt=0)
    kmesh: Tuple[int, int, int] = (2, 2, 2)
    z: int = Field(1, ge=0)
    n_bands: Optional[int] = Field(None, ge=1)
    # model_potential: v(x) = -amplitude * sum_i cos(b_i . x)
    amplitude: float = 4.0
    # gaussian_sites
    sites: List[SiteConfig] = Field(default_factory=lambda: [SiteConfig()])
    mix: float = Field(0.5, gt=0, le=1)
    tol: float = Field(1e-8, gt=0)
    max_iter: int = Field(200, ge=1)

    @model_validator(mode="after")
    def _check_sites(self) -> "CrystalConfig":
        if self.kind == "gaussian_sites":
            total = sum(site.charge for site in self.sites)
            if abs(total - self.z) > 1e-10:
                raise ValueError(f"site charges sum to {total}, expected z = {self.z}")
        return self


class ResponseConfig(_Section):
    supercell: Tuple[int, int, int] = (4, 4, 4)
    n_empty: Optional[int] = Field(None, ge=1)
    cg_tol: float = Field(1e-8, gt=0)
    cg_max_iter: int = Field(200, ge=1)
    tail_tol: float = Field(1e-6, gt=0)
    fit_tol: float = Field(1e-2, gt=0)
    fit_degree: int = Field(2, ge=1, le=3)
    eps: Optional[EpsSpec] = None


class DefectConfig(_Section):
    charge: float = 1.0
    width: float = Field(1.0, gt=0)
    mix: float = Field(0.5, gt=0, le=1)
    tol: float = Field(1e-10, gt=0)
    max_iter: int = Field(200, ge=1)
    dimension_cap: int = Field(4096, ge=1)
    t_values: List[float] = Field(default_factory=lambda: [0.1, 0.2, 0.4, 0.8])


class MacroConfig(_Section):
    """Macroscopic box, measured in crystal cells at m = 1."""

    box_cells: float = Field(1.0, gt=0)
    width: float = Field(0.15, gt=0)
    charge: float = 1.0
    increment: int = Field(1, ge=1)
    bump_separations: List[float] = Field(default_factory=lambda: [0.0, 0.15, 0.3])


class PekarConfig(_Section):
    eps: Optional[EpsSpec] = None
    # box side at unit coupling; run_pekar divides it by 1 - 1/lambda_min(eps)
    box_length: float = Field(48.0, gt=0)
    points: int = Field(49, ge=5)
    kernel: Literal["isolated", "periodic"] = "isolated"
    tol: float = Field(1e-8, gt=0)
    max_iter: int = Field(20000, ge=1)
    width: float = Field(4.0, gt=0)
    perturbation: float = Field(0.0, ge=0)
    witness: bool = False


class ExperimentSection(_Section):
    m_list: List[float] = Field(default_factory=lambda: [0.5, 0.25])
    cell_m_list: List[float] = Field(default_factory=lambda: [0.2, 0.1, 0.05, 0.025])
    polaron_m_list: List[float] = Field(default_factory=lambda: [1.0 / 3.0, 0.2])
    polaron_iterations: int = Field(30, ge=0)
    cell_grid_dims: Optional[Tuple[int, int, int]] = None
    finite_size: bool = True

    @field_validator("m_list", "cell_m_list", "polaron_m_list")
    @classmethod
    def _strictly_decreasing(cls, values: List[float]) -> List[float]:
        if not values:
            raise ValueError("m list must not be empty")
        if any(not 0.0 < m <= 1.0 for m in values):
            raise ValueError(f"m values must lie in (0, 1]: {values}")
        if any(a <= b for a, b in zip(values, values[1:])):
            raise ValueError(f"m values must be strictly decreasing: {values}")
        return values


class OutputConfig(_Section):
    directory: Optional[str] = None
    checkpoints: bool = False
    q_size_gate: int = Field(2048, ge=0)

    def resolved_directory(self) -> Path:
        return Path(self.directory or os.getenv(OUTPUT_DIR_ENV, "polaron_output"))


class ExperimentConfig(_Section):
    name: str = "polaron-lab"
    crystal: CrystalConfig = Field(default_factory=CrystalConfig)
    response: ResponseConfig = Field(default_factory=ResponseConfig)
    defect: DefectConfig = Field(default_factory=DefectConfig)
    macro: MacroConfig = Field(default_factory=MacroConfig)
    pekar: PekarConfig = Field(default_factory=PekarConfig)
    experiment: ExperimentSection = Field(default_factory=ExperimentSection)
    output: OutputConfig = Field(default_factory=OutputConfig)
    seed: int = 0
    threads: Optional[int] = Field(None, ge=1)

    @model_validator(mode="after")
    def _check_supercells(self) -> "ExperimentConfig":
        for m in self.experiment.m_list:
            if integer_ratio(self.macro.box_cells / m) is None:
                raise ValueError(
                    f"macro box of {self.macro.box_cells} cells at m = {m} is not an integer supercell"
                )
        for m in self.experiment.polaron_m_list:
            n = integer_ratio(self.macro.box_cells / m)
            if n is None or n % 2 == 0:
                raise ValueError(
                    f"polaron runs need an odd number of cells per side, got {self.macro.box_cells / m} at m = {m}"
                )
        return self

    def supercell_for(self, m: float, extra: int = 0) -> Tuple[int, int, int]:
        """Cells per side of the supercell that hosts the macro box at scale m."""
        n = integer_ratio(self.macro.box_cells / m)
        if n is None:
            raise ConfigError(f"1/m = {1.0 / m} does not give an integer supercell")
        return (n + extra,) * 3


def load_config(path: Optional[Union[str, Path]] = None, overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    """
    Load and validate an experiment configuration.

    Args:
        path: YAML file; None gives the defaults
        overrides: Nested values merged over the file contents

    Returns:
        The validated configuration

    Raises:
        ConfigError: On a missing file, bad YAML or a schema violation
    """
    load_dotenv()
    data: Dict[str, Any] = {}
    if path is not None:
        source = Path(path)
        if not source.exists():
            raise ConfigError(f"config file {source} does not exist")
        try:
            data = yaml.safe_load(source.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {source}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{source} must contain a mapping at the top level")
    if overrides:
        data = _merge(data, overrides)
    try:
        config = ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc
    logger.debug("loaded configuration %s", config.name)
    return config


def _merge(base: Dict[str, Any], update: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged
