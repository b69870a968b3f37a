"""Tests for dielectric matrices and the Pekar interaction."""

import os
import sys

import numpy as np
import pytest

# Add src directory to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from harness.experiments import response_context
from lattice_core.coulomb import coulomb_D
from lattice_core.lattice import Lattice, PlaneWaveBasis, periodized_gaussians
from response.dielectric import (
    DielectricMatrix,
    coulomb_kernel,
    dielectric_kernel,
    extract_eps_m,
    parse_eps,
    pekar_interaction,
    pekar_interaction_real_space,
    screening_ratio,
)
from utils.errors import ConfigError, SingularEps


class TestDielectricMatrix:
    """Test construction and parsing of eps."""

    def test_parse_variants(self):
        """Test identity, scalar, diagonal and full matrices."""
        assert parse_eps("identity").is_identity()
        assert parse_eps("Identity").is_identity()
        np.testing.assert_allclose(parse_eps(4).eps, 4 * np.eye(3))
        np.testing.assert_allclose(parse_eps("2.5").eps, 2.5 * np.eye(3))
        np.testing.assert_allclose(parse_eps([2, 3, 4]).eps, np.diag([2.0, 3.0, 4.0]))
        full = [[2.0, 0.1, 0.0], [0.1, 3.0, 0.0], [0.0, 0.0, 4.0]]
        np.testing.assert_allclose(parse_eps(full).eps, full)
        eps = DielectricMatrix.isotropic(3.0)
        assert parse_eps(eps) is eps

    def test_rejects_bad_input(self):
        """Test unreadable, non-square and asymmetric matrices."""
        with pytest.raises(ConfigError):
            parse_eps("vacuum")
        with pytest.raises(ConfigError):
            parse_eps([1.0, 2.0])
        with pytest.raises(ConfigError):
            parse_eps([[2.0, 1.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 2.0]])

    def test_eigenvalues_and_dict(self):
        """Test the sorted eigenvalues appear in the serialized form."""
        eps = parse_eps([4.0, 2.0, 3.0])
        np.testing.assert_allclose(eps.eigenvalues, [2.0, 3.0, 4.0])
        data = eps.to_dict()
        assert data["eigenvalues"] == pytest.approx([2.0, 3.0, 4.0])
        assert data["report"] == {"source": "diagonal"}


class TestPekarInteraction:
    """Test F^P and its kernels."""

    def setup_method(self):
        self.basis = PlaneWaveBasis.from_cutoff(Lattice.cubic(8.0), 8.0)
        self.rho = periodized_gaussians(self.basis, [[4.0, 4.0, 4.0]], [1.0], [0.8])

    def test_isotropic_closed_form(self):
        """Test F^P = 1/2 (1/e - 1) D(rho, rho) for scalar eps."""
        value = pekar_interaction(self.rho, DielectricMatrix.isotropic(4.0))
        expected = 0.5 * (1.0 / 4.0 - 1.0) * coulomb_D(self.rho, self.rho)
        assert value == pytest.approx(expected, rel=1e-12)

    def test_identity_gives_zero(self):
        """Test eps = 1 has no polarization energy."""
        assert pekar_interaction(self.rho, DielectricMatrix.identity()) == 0.0
        assert pekar_interaction(self.rho, DielectricMatrix.identity(), "isolated") == 0.0

    @pytest.mark.parametrize("kernel", ["periodic", "isolated"])
    def test_fourier_and_grid_agree(self, kernel):
        """Test the Fourier sum matches the grid integral of rho (W - rho * |x|^-1)."""
        eps = parse_eps([2.0, 3.0, 5.0])
        fourier = pekar_interaction(self.rho, eps, kernel)
        grid = pekar_interaction_real_space(self.rho, eps, kernel)
        assert grid == pytest.approx(fourier, rel=1e-10)

    def test_singular_eps(self):
        """Test a direction with k^T eps k = 0 is reported."""
        with pytest.raises(SingularEps):
            dielectric_kernel(self.basis, parse_eps([1.0, 1.0, 0.0]))

    def test_kernels(self):
        """Test the isolated kernel is finite at k = 0 and the jellium one vanishes there."""
        periodic = coulomb_kernel(self.basis, "periodic")
        isolated = coulomb_kernel(self.basis, "isolated")
        zero = self.basis.zero_index
        assert periodic[zero] == 0.0
        assert isolated[zero] == pytest.approx(2 * np.pi * 4.0**2)
        with pytest.raises(ConfigError):
            coulomb_kernel(self.basis, "ewald")


class TestExtraction:
    """Test the small-k dielectric fit."""

    def test_needs_large_supercell(self, response_ctx):
        """Test supercells below 4 cells per side are refused."""
        with pytest.raises(ConfigError):
            extract_eps_m(response_ctx)

    def test_vacuum_is_identity(self, small_config, vacuum_host):
        """Test the z = 0 host does not screen."""
        eps = extract_eps_m(response_context(small_config, vacuum_host))
        assert eps.is_identity()
        assert eps.k_extrapolation_report["source"] == "vacuum"

    def test_screening_ratio_range(self, response_ctx):
        """Test 0 < eta <= 1 for the lowest supercell mode."""
        eta = screening_ratio(response_ctx, (1, 0, 0))
        assert 0.0 < eta <= 1.0

    @pytest.mark.slow
    def test_cubic_host_is_isotropic(self, small_config, model_host):
        """Test the fitted matrix of the cubic host is scalar and screens."""
        eps = extract_eps_m(response_context(small_config, model_host, reps=(4, 4, 4)))
        values = eps.eigenvalues
        assert values.min() > 1.0
        assert values.max() - values.min() < 1e-2 * values.max()
        report = eps.k_extrapolation_report
        assert report["residual"] < 1e-2
        assert report["degree"] == 2
        assert all(len(row["k2"]) == 3 for row in report["rows"])
