"""Shared fixtures: a small cosine model host and its response contexts."""

import os
import sys

import numpy as np
import pytest
import yaml

# Add src directory to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from harness.config import load_config
from harness.experiments import build_crystal, response_context, supercell_defect

SMALL_OVERRIDES = {
    "name": "test",
    "crystal": {"ecut": 5.0, "kmesh": [1, 1, 1]},
    "response": {"supercell": [2, 2, 2], "eps": 4.0},
    "defect": {"charge": 0.2, "width": 1.0, "t_values": [0.25, 0.5, 1.0]},
    "pekar": {"box_length": 48.0, "points": 21, "width": 4.0, "tol": 1e-6},
    "experiment": {
        "m_list": [1.0, 0.5],
        "cell_m_list": [0.2, 0.1, 0.05],
        "polaron_m_list": [1.0],
        "polaron_iterations": 3,
        "finite_size": False,
    },
}


@pytest.fixture(scope="session")
def small_config():
    """Seconds-scale configuration on the 7 plane-wave cosine host."""
    return load_config(overrides=SMALL_OVERRIDES)


@pytest.fixture
def small_config_file(tmp_path):
    """The same configuration as a YAML file, writing into tmp_path."""
    data = dict(SMALL_OVERRIDES)
    data["output"] = {"directory": str(tmp_path / "out")}
    path = tmp_path / "small.yaml"
    path.write_text(yaml.safe_dump(data))
    return path


@pytest.fixture(scope="session")
def model_host(small_config):
    """Cosine host with one electron per cell."""
    return build_crystal(small_config)


@pytest.fixture(scope="session")
def vacuum_host():
    """z = 0 host: no electrons and no lattice potential."""
    cfg = load_config(overrides={**SMALL_OVERRIDES, "crystal": {"ecut": 5.0, "kmesh": [1, 1, 1], "z": 0}})
    return build_crystal(cfg)


@pytest.fixture(scope="session")
def response_ctx(small_config, model_host):
    """2 x 2 x 2 supercell keeping every band."""
    return response_context(small_config, model_host)


@pytest.fixture(scope="session")
def small_defect(small_config, response_ctx):
    """Weak Gaussian defect at the supercell center."""
    return supercell_defect(small_config, response_ctx)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
