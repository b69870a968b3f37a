"""Tests for the periodic host crystal."""

import os
import sys

import numpy as np
import pytest

# Add src directory to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from crystal.crystal_scf import (
    bloch_hamiltonian,
    crystal_energy,
    diagonalize_bloch,
    scf_crystal,
)
from lattice_core.coulomb import poisson_periodic
from lattice_core.lattice import BZMesh, Lattice, PlaneWaveBasis, periodized_gaussians
from utils.errors import ConfigError, NonNeutralSource


class TestModelHost:
    """Test the host built from the cosine potential."""

    def test_gap_and_fermi_level(self, model_host):
        """Test the host is an insulator with the Fermi level at mid-gap."""
        valence = model_host.bloch.eigenvalues[:, 0].max()
        conduction = model_host.bloch.eigenvalues[:, 1].min()
        assert model_host.gap == pytest.approx(conduction - valence)
        assert model_host.gap > 0.5
        assert valence < model_host.fermi_level < conduction

    def test_density_and_self_consistency(self, model_host):
        """Test rho0 carries z electrons and V0 solves the periodic Poisson problem."""
        assert model_host.rho0.integral() == pytest.approx(model_host.z, abs=1e-10)
        assert model_host.mu0.integral() == pytest.approx(model_host.z, abs=1e-10)
        potential = poisson_periodic(model_host.rho0 - model_host.mu0)
        np.testing.assert_allclose(potential.coeffs, model_host.v0.coeffs, atol=1e-10)

    def test_bands_are_orthonormal(self, model_host):
        """Test the band coefficient columns are orthonormal."""
        assert model_host.bloch.orthonormality_error() < 1e-12

    def test_summary_energies(self, model_host):
        """Test the energy diagnostic is part of the summary."""
        summary = model_host.summary()
        energy = crystal_energy(model_host)
        assert summary["total_energy"] == pytest.approx(energy["kinetic_energy"] + energy["electrostatic_energy"])
        assert energy["kinetic_energy"] > 0.0
        assert energy["electrostatic_energy"] >= 0.0

    def test_fermi_level_must_stay_in_gap(self, model_host):
        """Test moving the Fermi level outside the gap is refused."""
        inside = model_host.with_fermi_level(model_host.fermi_level + 0.1 * model_host.gap)
        assert inside.fermi_level > model_host.fermi_level
        with pytest.raises(ConfigError):
            model_host.with_fermi_level(model_host.fermi_level + model_host.gap)

    def test_vacuum_host(self, vacuum_host):
        """Test z = 0 gives an empty, field-free host."""
        assert vacuum_host.z == 0
        assert np.isinf(vacuum_host.gap)
        assert np.abs(vacuum_host.v0.coeffs).max() == 0.0
        assert vacuum_host.rho0.integral() == 0.0


class TestBlochHamiltonian:
    """Test Bloch Hamiltonians and their diagonalization."""

    def test_hermitian_and_consistent(self, model_host):
        """Test the dense Hamiltonian is Hermitian and matches the band solver."""
        q = model_host.bloch.mesh.points[0] + np.array([0.1, -0.2, 0.3])
        hamiltonian = bloch_hamiltonian(model_host.v0, q, model_host.basis)
        np.testing.assert_allclose(hamiltonian, hamiltonian.conj().T, atol=1e-13)
        mesh = BZMesh.gamma_only(model_host.lattice)
        bands = diagonalize_bloch(model_host.v0, model_host.basis, mesh, 3)
        reference = np.linalg.eigvalsh(bloch_hamiltonian(model_host.v0, mesh.points[0], model_host.basis))
        np.testing.assert_allclose(bands.eigenvalues[0], reference[:3], atol=1e-10)

    def test_band_count_limits(self, model_host):
        """Test impossible band counts are config errors."""
        mesh = BZMesh.gamma_only(model_host.lattice)
        with pytest.raises(ConfigError):
            diagonalize_bloch(model_host.v0, model_host.basis, mesh, model_host.basis.size + 1)


class TestSelfConsistentField:
    """Test the rHF loop on Gaussian nuclei."""

    def setup_method(self):
        self.lattice = Lattice.cubic(2.0)
        self.basis = PlaneWaveBasis.from_cutoff(self.lattice, 5.0)
        self.density_basis = PlaneWaveBasis.from_cutoff(self.lattice, 20.0)
        self.mesh = BZMesh.gamma_only(self.lattice)

    def test_rejects_charged_cell(self):
        """Test nuclei that do not balance z electrons are refused."""
        mu0 = periodized_gaussians(self.density_basis, [[0.0, 0.0, 0.0]], [0.5], [0.3])
        with pytest.raises(NonNeutralSource):
            scf_crystal(mu0, self.basis, self.mesh, 1)

    def test_rejects_bad_mixing(self):
        """Test the mixing parameter range."""
        mu0 = periodized_gaussians(self.density_basis, [[0.0, 0.0, 0.0]], [1.0], [0.3])
        with pytest.raises(ConfigError):
            scf_crystal(mu0, self.basis, self.mesh, 1, mix=0.0)

    @pytest.mark.slow
    def test_converges_to_self_consistency(self):
        """Test the converged density reproduces its own potential."""
        mu0 = periodized_gaussians(self.density_basis, [[0.0, 0.0, 0.0]], [1.0], [0.3])
        state = scf_crystal(mu0, self.basis, self.mesh, 1, mix=0.5, tol=1e-9, max_iter=400)
        assert state.scf_residual <= 1e-9
        assert state.rho0.integral() == pytest.approx(1.0, abs=1e-10)
        potential = poisson_periodic(state.rho0 - state.mu0)
        np.testing.assert_allclose(potential.coeffs, state.v0.coeffs, atol=1e-12)
        assert state.gap > 0.0
