"""Tests for the anisotropic Pekar solver."""

import os
import sys

import numpy as np
import pytest

# Add src directory to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from harness.experiments import pekar_box_length, pekar_scaling
from lattice_core.lattice import grid_integral
from pekar.pekar_solver import (
    centroid,
    cubic_box,
    gaussian_trial,
    pekar_energy,
    pekar_energy_check,
    permuted_eps,
    radial_symmetry_error,
    recenter,
    shell_mass,
    solve_pekar_ground,
)
from pekar.radial_oracle import isotropic_energy
from response.dielectric import DielectricMatrix, parse_eps
from utils.errors import BoxTooSmall, ConfigError, NoBinding


@pytest.fixture(scope="module")
def anisotropic_state():
    eps = parse_eps([5.0, 8.0, 10.0])
    grid = cubic_box(pekar_box_length(48.0, eps), 21)
    return solve_pekar_ground(eps, grid, tol=1e-6, width=5.0)


class TestPekarGroundState:
    """Test minimizers of the Pekar functional."""

    def test_identity_does_not_bind(self):
        """Test eps = 1 is reported as no binding."""
        with pytest.raises(NoBinding) as info:
            solve_pekar_ground(DielectricMatrix.identity(), cubic_box(10.0, 9))
        assert info.value.exit_code == 0
        assert info.value.to_dict()["status"] == "no_binding"

    def test_rejects_eigenvalues_below_one(self):
        """Test eps with an eigenvalue below 1 is a config error."""
        with pytest.raises(ConfigError):
            solve_pekar_ground(parse_eps([0.5, 2.0, 2.0]), cubic_box(10.0, 9))

    def test_anisotropic_minimizer(self, anisotropic_state):
        """Test a negative energy, a small residual and a normalized, centered state."""
        state = anisotropic_state
        assert state.energy < 0.0
        assert state.interaction < 0.0 < state.kinetic
        assert state.residual <= 1e-6
        assert grid_integral(state.psi**2, state.grid) == pytest.approx(1.0, rel=1e-12)
        assert shell_mass(state.psi, state.grid) <= 1e-6
        center = state.grid.lattice.basis @ np.full(3, 0.5)
        spacing = state.grid.lattice.basis[0, 0] / state.grid.grid_dims[0]
        assert np.abs(centroid(state.psi, state.grid) - center).max() <= spacing

    def test_double_evaluation(self, anisotropic_state):
        """Test the Fourier and real-space interaction agree at the minimizer."""
        state = anisotropic_state
        assert pekar_energy_check(state.psi, state.grid, state.eps) < 1e-10
        total, kinetic, interaction = pekar_energy(state.psi, state.grid, state.eps)
        assert total == pytest.approx(state.energy, rel=1e-12)

    def test_permutation_covariance(self, anisotropic_state):
        """Test permuting the axes of eps keeps the energy."""
        state = anisotropic_state
        rotated = solve_pekar_ground(permuted_eps(state.eps, (2, 0, 1)), state.grid, tol=1e-6, width=5.0)
        assert rotated.energy == pytest.approx(state.energy, rel=1e-6)

    def test_small_box_is_reported(self):
        """Test a polaron squeezed into a tiny box trips the shell check."""
        with pytest.raises(BoxTooSmall):
            solve_pekar_ground(DielectricMatrix.isotropic(10.0), cubic_box(6.0, 13), tol=1e-4)

    def test_torus_states_may_spread(self):
        """Test the shell check can be switched off."""
        state = solve_pekar_ground(
            DielectricMatrix.isotropic(10.0), cubic_box(6.0, 13), tol=1e-4, check_box=False
        )
        assert state.energy < 0.0


class TestHelpers:
    """Test boxes, trials and recentering."""

    def test_cubic_box_is_odd(self):
        """Test even point counts are bumped to odd ones."""
        assert cubic_box(10.0, 16).grid_dims == (17, 17, 17)

    def test_recenter_moves_the_centroid(self):
        """Test a shifted Gaussian is rolled back to the box center."""
        grid = cubic_box(10.0, 21)
        psi = np.roll(gaussian_trial(grid, 1.0), (4, -3, 2), axis=(0, 1, 2))
        moved = recenter(psi, grid)
        np.testing.assert_allclose(centroid(moved, grid), [5.0, 5.0, 5.0], atol=1e-8)

    def test_box_length_scaling(self):
        """Test the box grows like 1 / (1 - 1/lambda_min)."""
        assert pekar_box_length(48.0, DielectricMatrix.isotropic(2.0)) == pytest.approx(96.0)
        assert pekar_box_length(48.0, parse_eps([4.0, 2.0, 8.0])) == pytest.approx(96.0)
        assert pekar_box_length(48.0, DielectricMatrix.identity()) == 48.0


@pytest.mark.slow
class TestIsotropicReference:
    """Test the grid solver against the radial oracle."""

    def test_matches_radial_oracle(self):
        """Test eps = 2 against the radial Choquard energy."""
        eps = DielectricMatrix.isotropic(2.0)
        grid = cubic_box(pekar_box_length(48.0, eps), 49)
        state = solve_pekar_ground(eps, grid, tol=1e-8, width=8.0)
        reference = isotropic_energy(2.0)
        assert state.energy == pytest.approx(reference, rel=5e-3)
        assert radial_symmetry_error(state)["max_error"] < 1e-2
        assert state.virial_residual() < 1e-2

    def test_coupling_scaling(self):
        """Test E(eps) = (1 - 1/eps)^2 E_0 when the box follows the polaron size."""
        grid = cubic_box(96.0, 33)
        result = pekar_scaling([2.0, 4.0, 10.0], grid, tol=1e-6, width=8.0, check_box=False)
        assert result["max_relative_error"] < 1e-6
        assert result["e0"] == pytest.approx(-0.05426, rel=5e-2)
