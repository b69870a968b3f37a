"""Tests for the invariant suite."""

import os
import sys

import numpy as np
import pytest

# Add src directory to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from harness.verification import _Suite, random_gaussian, run_verification, smooth_random_state
from lattice_core.lattice import Lattice, PlaneWaveBasis, grid_integral
from response.dielectric import parse_eps


class TestSuiteHelpers:
    """Test the check bookkeeping and the random inputs."""

    def test_violations_are_listed(self):
        """Test failed checks end up in the violation list."""
        suite = _Suite()
        suite.check("small", 1e-12, 1e-10)
        suite.check("large", 1.0, 1e-10)
        suite.check("explicit", 0.5, 0.9, passed=False)
        assert suite.violations() == ["large", "explicit"]
        assert [row["passed"] for row in suite.report.rows] == [True, False, False]

    def test_smooth_state_is_normalized(self, rng):
        """Test random states have unit L2 norm on the grid."""
        grid = PlaneWaveBasis.full_grid(Lattice.cubic(6.0), (9, 9, 9))
        psi = smooth_random_state(grid, rng, 1.0)
        assert np.isrealobj(psi)
        assert grid_integral(psi**2, grid) == pytest.approx(1.0)

    def test_random_gaussian_charge(self, rng):
        """Test random defects carry a fraction of the requested charge."""
        basis = PlaneWaveBasis.from_cutoff(Lattice.cubic(8.0), 6.0)
        nu = random_gaussian(basis, rng, 0.5, 0.8)
        assert 0.1 - 1e-12 <= nu.integral() <= 0.5 + 1e-12


@pytest.mark.slow
class TestRunVerification:
    """Test the whole suite on the small host."""

    def test_small_host_passes(self, small_config, model_host):
        """Test no invariant is violated on the cosine host."""
        report = run_verification(small_config, model_host, parse_eps(4.0), samples=2)
        names = [row["name"] for row in report.rows]
        assert "energy_decoupling" in names
        assert "projector_identity" in names
        assert "pekar_translation_invariance" in names
        tolerances = {row["name"]: row["tolerance"] for row in report.rows}
        assert tolerances["energy_decoupling"] == 1e-11
        assert tolerances["b_m_translation_covariance"] == 1e-10
        assert report.checks["violations"] == []
        assert report.checks["passed"]
