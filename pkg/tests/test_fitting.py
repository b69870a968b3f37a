"""Tests for order fits and extrapolation."""

import os
import sys

import numpy as np
import pytest

# Add src directory to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from utils.errors import FitFailure
from utils.fitting import extrapolate_to_zero, fit_order, richardson_extrapolate


class TestFitOrder:
    """Test log-log order fits."""

    def test_power_law(self):
        """Test the order and constant of an exact power law."""
        m = np.array([0.5, 0.25, 0.125, 0.0625])
        result = fit_order(m, 3.0 * m**2)
        assert result["order"] == pytest.approx(2.0, abs=1e-12)
        assert result["constant"] == pytest.approx(3.0, rel=1e-10)
        assert result["points"] == 4
        assert not result["exact"]

    def test_signs_are_ignored(self):
        """Test negative errors are fitted by magnitude."""
        m = np.array([0.4, 0.2, 0.1])
        result = fit_order(m, -0.5 * m)
        assert result["order"] == pytest.approx(1.0, abs=1e-12)

    def test_exact_zero_errors(self):
        """Test errors below the floor are reported as exact."""
        result = fit_order([0.5, 0.25, 0.125], [0.0, 1e-16, 0.0], floor=1e-14)
        assert result["exact"]
        assert np.isinf(result["order"])

    def test_floor_drops_points(self):
        """Test errors under the floor leave out their points."""
        result = fit_order([0.5, 0.25, 0.125], [0.25, 0.0625, 0.0], floor=1e-14)
        assert result["points"] == 2
        assert result["order"] == pytest.approx(2.0)

    def test_failures(self):
        """Test too few points and non-positive parameters."""
        with pytest.raises(FitFailure):
            fit_order([0.5], [0.1])
        with pytest.raises(FitFailure):
            fit_order([0.5, 0.0], [0.1, 0.2])
        with pytest.raises(FitFailure):
            fit_order([0.5, 0.25, 0.125], [0.1, 0.0, 0.0], floor=1e-14)


class TestExtrapolation:
    """Test extrapolation to a zero parameter."""

    def test_linear(self):
        """Test a straight line is extrapolated exactly."""
        result = extrapolate_to_zero([0.5, 0.25, 0.125], [2.5, 2.25, 2.125])
        assert result["value"] == pytest.approx(2.0, abs=1e-12)
        assert result["residual"] < 1e-12

    def test_quadratic(self):
        """Test a degree-2 fit of a parabola."""
        m = np.array([0.4, 0.2, 0.1, 0.05])
        result = extrapolate_to_zero(m, 1.0 - m + 3.0 * m**2, degree=2)
        assert result["value"] == pytest.approx(1.0, abs=1e-10)

    def test_needs_enough_points(self):
        """Test a degree-d fit needs d + 1 points."""
        with pytest.raises(FitFailure):
            extrapolate_to_zero([0.5, 0.25], [1.0, 2.0], degree=2)

    def test_richardson(self):
        """Test Richardson removes the leading error term."""
        h = np.array([0.4, 0.2, 0.1])
        values = 1.0 + 2.0 * h**2
        assert richardson_extrapolate(values, p=2) == pytest.approx(1.0, abs=1e-12)
        with pytest.raises(FitFailure):
            richardson_extrapolate([1.0], p=2)
