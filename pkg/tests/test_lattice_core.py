"""Tests for lattices, plane-wave bases and periodic electrostatics."""

import os
import sys

import numpy as np
import pytest

# Add src directory to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from lattice_core.coulomb import (
    coulomb_D,
    coulomb_norm,
    dilate,
    dilate_adjoint,
    periodic_kernel,
    poisson_periodic,
    truncated_kernel,
)
from lattice_core.lattice import (
    BZMesh,
    FieldKind,
    Lattice,
    PeriodicField,
    PlaneWaveBasis,
    grid_integral,
    grid_kinetic,
    periodized_gaussians,
    single_mode,
)
from utils.errors import ConfigError, DomainMismatch, EmptyBasis, IncommensurateGrids, NonNeutralSource, ResolutionLoss


def _dilated_basis(basis: PlaneWaveBasis, m: float) -> PlaneWaveBasis:
    return PlaneWaveBasis(basis.lattice.scaled(1.0 / m), basis.ecut * m**2, basis.gvectors, basis.grid_dims)


class TestLattice:
    """Test Bravais lattices and Brillouin-zone meshes."""

    def test_reciprocal_vectors(self):
        """Test b_i . a_j = 2 pi delta_ij."""
        lattice = Lattice.tetragonal(2.0, 3.0)
        np.testing.assert_allclose(lattice.reciprocal.T @ lattice.basis, 2 * np.pi * np.eye(3), atol=1e-12)

    def test_supercell_and_scaling(self):
        """Test supercell volumes and scaled lattices."""
        lattice = Lattice.cubic(2.0)
        assert lattice.supercell((2, 3, 1)).cell_volume == pytest.approx(48.0)
        assert lattice.scaled(0.5).is_close(Lattice.cubic(1.0))

    def test_rejects_bad_basis(self):
        """Test that a left-handed basis is rejected."""
        with pytest.raises(ConfigError):
            Lattice(-np.eye(3))

    def test_monkhorst_pack_mesh(self):
        """Test mesh size, weights and the -q lookup."""
        mesh = BZMesh.monkhorst_pack(Lattice.cubic(2.0), (2, 3, 1))
        assert mesh.n_points == 6
        assert mesh.weights.sum() == pytest.approx(1.0)
        negated = mesh.negated_index()
        assert sorted(negated.tolist()) == list(range(6))


class TestPlaneWaveBasis:
    """Test Miller-index sets and their grids."""

    def test_cutoff_sphere(self):
        """Test the basis is sorted, closed under negation and within the cutoff."""
        basis = PlaneWaveBasis.from_cutoff(Lattice.cubic(2.0), 10.0)
        assert basis.size == 19
        assert np.all(basis.index_of(-basis.gvectors) >= 0)
        assert np.all(0.5 * basis.g2 <= 10.0 + 1e-12)
        assert basis.gvectors[basis.zero_index].tolist() == [0, 0, 0]

    def test_full_grid_needs_odd_dimensions(self):
        """Test full grids reject even dimensions."""
        with pytest.raises(ConfigError):
            PlaneWaveBasis.full_grid(Lattice.cubic(1.0), (4, 5, 5))
        grid = PlaneWaveBasis.full_grid(Lattice.cubic(1.0), (5, 5, 7))
        assert grid.size == grid.n_grid == 175

    def test_empty_basis_is_refused(self):
        """Test a basis without G vectors cannot be built."""
        with pytest.raises(EmptyBasis):
            PlaneWaveBasis(Lattice.cubic(1.0), 1.0, np.zeros((0, 3), dtype=int), (3, 3, 3))

    def test_grid_transform_of_a_mode(self):
        """Test a single cosine mode on the grid."""
        basis = PlaneWaveBasis.from_cutoff(Lattice.cubic(2.0), 20.0)
        field = single_mode(basis, (1, 0, 0), 3.0)
        points = basis.grid_points()
        expected = 3.0 * np.cos(np.pi * points[..., 0])
        np.testing.assert_allclose(field.values(), expected, atol=1e-12)

    def test_missing_mode(self):
        """Test a mode outside the basis is reported."""
        basis = PlaneWaveBasis.from_cutoff(Lattice.cubic(2.0), 5.0)
        with pytest.raises(DomainMismatch):
            single_mode(basis, (3, 0, 0), 1.0)


class TestPeriodicField:
    """Test periodic fields and their algebra."""

    def test_gaussian_charge(self):
        """Test periodized Gaussians carry their total charge."""
        basis = PlaneWaveBasis.from_cutoff(Lattice.cubic(4.0), 20.0)
        field = periodized_gaussians(basis, [[1.0, 2.0, 0.5]], [0.7], [0.8])
        assert field.integral() == pytest.approx(0.7, rel=1e-12)
        assert field.hermiticity_error() < 1e-14

    def test_translation_keeps_norms(self):
        """Test translations preserve L2 and Coulomb norms."""
        basis = PlaneWaveBasis.from_cutoff(Lattice.cubic(4.0), 20.0)
        field = periodized_gaussians(basis, [[1.0, 2.0, 0.5]], [1.0], [0.8])
        moved = field.translated(np.array([0.3, -1.1, 2.0]))
        assert moved.l2_norm() == pytest.approx(field.l2_norm(), rel=1e-12)
        assert coulomb_norm(moved) == pytest.approx(coulomb_norm(field), rel=1e-12)

    def test_transfer_reports_lost_mass(self):
        """Test transfer onto a smaller basis reports the dropped fraction."""
        lattice = Lattice.cubic(4.0)
        big = PlaneWaveBasis.from_cutoff(lattice, 20.0)
        small = PlaneWaveBasis.from_cutoff(lattice, 2.0)
        field = periodized_gaussians(big, [[0.0, 0.0, 0.0]], [1.0], [0.3])
        moved, lost = field.transfer(small)
        assert moved.basis is small
        assert 0.0 < lost < 1.0
        _, none_lost = moved.transfer(big)
        assert none_lost == 0.0

    def test_fields_on_different_bases(self):
        """Test arithmetic across bases is refused."""
        lattice = Lattice.cubic(4.0)
        a = PeriodicField.zeros(PlaneWaveBasis.from_cutoff(lattice, 5.0))
        b = PeriodicField.zeros(PlaneWaveBasis.from_cutoff(lattice, 8.0))
        with pytest.raises(DomainMismatch):
            a + b

    def test_grid_kinetic_of_a_plane_wave(self):
        """Test 1/2 int |grad psi|^2 for cos(k x)."""
        grid = PlaneWaveBasis.full_grid(Lattice.cubic(2.0), (9, 9, 9))
        x = grid.grid_points()[..., 0]
        psi = np.cos(np.pi * x)
        expected = 0.5 * np.pi**2 * grid_integral(np.sin(np.pi * x) ** 2, grid)
        assert grid_kinetic(psi, grid) == pytest.approx(expected, rel=1e-12)


class TestCoulomb:
    """Test the periodic Coulomb pairing, kernels and dilations."""

    def setup_method(self):
        self.basis = PlaneWaveBasis.from_cutoff(Lattice.cubic(4.0), 20.0)
        self.nu = periodized_gaussians(self.basis, [[2.0, 2.0, 2.0], [1.0, 1.0, 1.0]], [1.0, -0.4], [0.7, 0.5])

    def test_pairing_is_symmetric_and_positive(self):
        """Test D(f, g) = D(g, f) and D(f, f) > 0."""
        other = self.nu.translated(np.array([0.5, 0.0, 0.0]))
        assert coulomb_D(self.nu, other) == pytest.approx(coulomb_D(other, self.nu), rel=1e-12)
        assert coulomb_D(self.nu, self.nu) > 0.0

    def test_poisson_needs_neutral_source(self):
        """Test the periodic Poisson solve rejects charged sources."""
        with pytest.raises(NonNeutralSource):
            poisson_periodic(self.nu)
        neutral = self.nu - periodized_gaussians(self.basis, [[0.0, 0.0, 0.0]], [0.6], [1.0])
        potential = poisson_periodic(neutral)
        assert potential.kind == FieldKind.POTENTIAL
        assert potential.inner(neutral) == pytest.approx(coulomb_D(neutral, neutral), rel=1e-12)

    def test_kernels(self):
        """Test the jellium kernel drops k = 0 and the truncated one is finite there."""
        k2 = np.array([0.0, 1.0, 4.0])
        np.testing.assert_allclose(periodic_kernel(k2), [0.0, 4 * np.pi, np.pi])
        truncated = truncated_kernel(k2, 3.0)
        assert truncated[0] == pytest.approx(2 * np.pi * 9.0)
        assert truncated[1] == pytest.approx(4 * np.pi * (1 - np.cos(3.0)))

    def test_dilation_scaling(self):
        """Test U_m keeps the charge and scales D by m."""
        m = 0.25
        target = _dilated_basis(self.basis, m)
        moved = dilate(self.nu, m, target)
        assert moved.integral() == pytest.approx(self.nu.integral(), rel=1e-12)
        assert coulomb_D(moved, moved) == pytest.approx(m * coulomb_D(self.nu, self.nu), rel=1e-12)

    def test_dilation_adjoint(self):
        """Test <U_m f, g> = <f, U_m^* g>."""
        m = 0.5
        target = _dilated_basis(self.basis, m)
        g = periodized_gaussians(target, [[3.0, 1.0, 5.0]], [1.0], [1.5])
        lhs = dilate(self.nu, m, target).inner(g)
        rhs = self.nu.inner(dilate_adjoint(g, m, self.basis))
        assert lhs == pytest.approx(rhs, rel=1e-12)

    def test_dilation_checks_boxes(self):
        """Test dilations need the target box scaled by 1/m and enough modes."""
        with pytest.raises(IncommensurateGrids):
            dilate(self.nu, 0.5, self.basis)
        with pytest.raises(IncommensurateGrids):
            dilate(self.nu, 1.5, self.basis)
        coarse = PlaneWaveBasis.from_cutoff(Lattice.cubic(8.0), 0.5)
        sharp = periodized_gaussians(self.basis, [[0.0, 0.0, 0.0]], [1.0], [0.2])
        with pytest.raises(ResolutionLoss):
            dilate(sharp, 0.5, coarse)
