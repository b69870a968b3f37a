"""
Periodic reduced Hartree-Fock ground state of the host crystal.

This module handles:
1. Bloch Hamiltonians 1/2 |G + q|^2 + V(G - G') on a plane-wave basis
2. Band structures on a Monkhorst-Pack mesh and the Aufbau density
3. Gap certification and the Fermi level at mid-gap
4. The damped self-consistent field loop and a prescribed-potential host

Spin is neglected: every band below the Fermi level holds one electron.
"""

import logging
import math
from dataclasses import dataclass, replace
from typing import Any, Dict, Optional

import numpy as np
import scipy.linalg

from lattice_core.coulomb import coulomb_D, coulomb_norm, laplacian, poisson_periodic
from lattice_core.lattice import BZMesh, FieldKind, PeriodicField, PlaneWaveBasis
from utils.errors import ConfigError, DomainMismatch, NoConvergence, NoGap, NonNeutralSource
from utils.parallel import parallel_map

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class BlochEigensystem:
    """Bands lambda_{n,q} (ascending) and coefficient columns a_{n,q}."""

    mesh: BZMesh
    basis: PlaneWaveBasis
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    @property
    def n_bands(self) -> int:
        return int(self.eigenvalues.shape[1])

    def orthonormality_error(self) -> float:
        worst = 0.0
        for vectors in self.eigenvectors:
            gram = vectors.conj().T @ vectors
            worst = max(worst, float(np.abs(gram - np.eye(self.n_bands)).max()))
        return worst

    def cell_functions(self, grid: PlaneWaveBasis, iq: int, bands: np.ndarray) -> np.ndarray:
        """
        Periodic parts u_{n,q}(x) = sum_G a_{n,q}(G) exp(iG.x) on the grid of ``grid``.

        Returns:
            Complex array of shape (len(bands), *grid.grid_dims)
        """
        bands = np.atleast_1d(np.asarray(bands, dtype=int))
        dims = grid.grid_dims
        wrapped = np.mod(self.basis.gvectors, np.asarray(dims))
        boxes = np.zeros((bands.size,) + dims, dtype=complex)
        boxes[:, wrapped[:, 0], wrapped[:, 1], wrapped[:, 2]] = self.eigenvectors[iq][:, bands].T
        return np.fft.ifftn(boxes, axes=(1, 2, 3)) * grid.n_grid


@dataclass(frozen=True, eq=False)
class CrystalGroundState:
    """Converged periodic host: densities, potential, bands and Fermi level."""

    mu0: PeriodicField
    rho0: PeriodicField
    v0: PeriodicField
    bloch: BlochEigensystem
    z: int
    fermi_level: float
    gap: float
    scf_residual: float
    iterations: int = 0

    @property
    def basis(self) -> PlaneWaveBasis:
        return self.bloch.basis

    @property
    def density_basis(self) -> PlaneWaveBasis:
        return self.v0.basis

    @property
    def lattice(self):
        return self.basis.lattice

    def with_fermi_level(self, fermi_level: float) -> "CrystalGroundState":
        """Same crystal with another chemical potential inside the gap."""
        if self.z > 0:
            valence = float(self.bloch.eigenvalues[:, self.z - 1].max())
            conduction = float(self.bloch.eigenvalues[:, self.z].min())
            if not valence < fermi_level < conduction:
                raise ConfigError(
                    f"Fermi level {fermi_level} outside the gap ({valence}, {conduction})"
                )
        return replace(self, fermi_level=float(fermi_level))

    def summary(self) -> Dict[str, Any]:
        return {
            "z": self.z,
            "fermi_level": self.fermi_level,
            "gap": self.gap,
            "scf_residual": self.scf_residual,
            "iterations": self.iterations,
            "n_bands": self.bloch.n_bands,
            "n_kpoints": self.bloch.mesh.n_points,
            "n_planewaves": self.basis.size,
            **crystal_energy(self),
        }


def default_band_count(z: int, basis: PlaneWaveBasis) -> int:
    return min(z + max(8, z), basis.size)


def _difference_index(basis: PlaneWaveBasis, vbasis: PlaneWaveBasis) -> np.ndarray:
    diff = basis.gvectors[:, None, :] - basis.gvectors[None, :, :]
    index = vbasis.index_of(diff)
    if np.any(index < 0):
        raise DomainMismatch("potential basis does not contain all differences G - G'")
    return index


def bloch_hamiltonian(v: PeriodicField, q: np.ndarray, basis: PlaneWaveBasis) -> np.ndarray:
    """
    Dense Bloch Hamiltonian at crystal momentum q.

    Args:
        v: Real lattice-periodic potential
        q: Cartesian crystal momentum
        basis: Plane-wave basis of the periodic parts

    Returns:
        Hermitian matrix 1/2 |G + q|^2 delta_{GG'} + v(G - G')
    """
    index = _difference_index(basis, v.basis)
    hamiltonian = v.coeffs[index].astype(complex)
    kq = basis.gcart + np.asarray(q, dtype=float)[None, :]
    hamiltonian[np.diag_indices(basis.size)] += 0.5 * np.einsum("ij,ij->i", kq, kq)
    return hamiltonian


def diagonalize_bloch(
    v: PeriodicField,
    basis: PlaneWaveBasis,
    mesh: BZMesh,
    n_bands: int,
    threads: Optional[int] = None,
) -> BlochEigensystem:
    """Lowest ``n_bands`` eigenpairs of the Bloch Hamiltonian at every mesh point."""
    if not 1 <= n_bands <= basis.size:
        raise ConfigError(f"n_bands = {n_bands} must lie in [1, {basis.size}]")
    index = _difference_index(basis, v.basis)
    coupling = v.coeffs[index]

    def solve(q: np.ndarray):
        hamiltonian = coupling.astype(complex)
        kq = basis.gcart + q[None, :]
        hamiltonian[np.diag_indices(basis.size)] += 0.5 * np.einsum("ij,ij->i", kq, kq)
        return scipy.linalg.eigh(hamiltonian, subset_by_index=[0, n_bands - 1])

    results = parallel_map(solve, list(mesh.points), threads)
    eigenvalues = np.array([r[0] for r in results])
    eigenvectors = np.array([r[1] for r in results])
    return BlochEigensystem(mesh, basis, eigenvalues, eigenvectors)


def band_density(bloch: BlochEigensystem, z: int, density_basis: PlaneWaveBasis) -> PeriodicField:
    """
    Density of the lowest z bands, averaged over the mesh.

    rho(x) = sum_q w_q sum_{n <= z} |u_{n,q}(x)|^2 / |cell|, which integrates
    to z over the cell.
    """
    if z == 0:
        return PeriodicField.zeros(density_basis, FieldKind.DENSITY)
    values = np.zeros(density_basis.grid_dims)
    occupied = np.arange(z)
    for iq, weight in enumerate(bloch.mesh.weights):
        u = bloch.cell_functions(density_basis, iq, occupied)
        values += weight * np.sum(np.abs(u) ** 2, axis=0)
    values /= density_basis.volume
    return PeriodicField.from_values(density_basis, values, FieldKind.DENSITY)


def check_gap(bloch: BlochEigensystem, z: int) -> tuple:
    """
    Certify the gap between bands z and z + 1 across the mesh.

    Returns:
        (gap, fermi_level) with the Fermi level at mid-gap. For z = 0 the
        gap is infinite and the Fermi level sits one Hartree below band 1.

    Raises:
        NoGap: If the highest occupied level reaches the lowest empty one
    """
    if z == 0:
        return math.inf, float(bloch.eigenvalues[:, 0].min()) - 1.0
    if bloch.n_bands < z + 1:
        raise ConfigError(f"need at least z + 1 = {z + 1} bands, have {bloch.n_bands}")
    valence = float(bloch.eigenvalues[:, z - 1].max())
    conduction = float(bloch.eigenvalues[:, z].min())
    gap = conduction - valence
    if gap <= 0.0:
        raise NoGap(f"bands {z} and {z + 1} overlap by {-gap:.4e} Ha")
    return gap, 0.5 * (valence + conduction)


def crystal_energy(state: CrystalGroundState) -> Dict[str, float]:
    """Per-cell kinetic energy of the occupied bands and the electrostatic energy."""
    bloch = state.bloch
    kinetic = 0.0
    for iq, weight in enumerate(bloch.mesh.weights):
        kq = bloch.basis.gcart + bloch.mesh.points[iq][None, :]
        diag = 0.5 * np.einsum("ij,ij->i", kq, kq)
        occupied = bloch.eigenvectors[iq][:, : state.z]
        kinetic += weight * float(np.sum(diag[:, None] * np.abs(occupied) ** 2))
    charge = state.rho0 - state.mu0
    electrostatic = 0.5 * coulomb_D(charge, charge)
    return {
        "kinetic_energy": kinetic,
        "electrostatic_energy": electrostatic,
        "total_energy": kinetic + electrostatic,
    }


def scf_crystal(
    mu0: PeriodicField,
    basis: PlaneWaveBasis,
    bz: BZMesh,
    z: int,
    mix: float = 0.5,
    tol: float = 1e-8,
    max_iter: int = 200,
    n_bands: Optional[int] = None,
    threads: Optional[int] = None,
) -> CrystalGroundState:
    """
    Solve the periodic rHF equations by damped density mixing.

    Args:
        mu0: Nuclear density on the density basis (integrates to z)
        basis: Plane-wave basis of the Bloch functions
        bz: Brillouin-zone mesh
        z: Electrons per cell
        mix: Linear mixing parameter in (0, 1]
        tol: Coulomb-norm tolerance on rho_out - rho_in
        max_iter: Iteration cap
        n_bands: Bands per k-point (default z + max(8, z))

    Returns:
        The converged CrystalGroundState

    Raises:
        NonNeutralSource: If mu0 does not carry z electrons' worth of charge
        NoConvergence: If the residual is above ``tol`` after ``max_iter``
        NoGap: If the converged crystal is not an insulator
    """
    if not 0.0 < mix <= 1.0:
        raise ConfigError(f"mix must lie in (0, 1], got {mix}")
    if abs(mu0.integral() - z) > 1e-8:
        raise NonNeutralSource(f"nuclear charge {mu0.integral():.10f} differs from z = {z}")
    n_bands = n_bands or default_band_count(z, basis)
    density_basis = mu0.basis

    rho_in = mu0.with_kind(FieldKind.DENSITY)
    residual = math.inf
    previous_energy = math.inf
    iteration = 0
    for iteration in range(1, max_iter + 1):
        potential = poisson_periodic(rho_in - mu0)
        bloch = diagonalize_bloch(potential, basis, bz, n_bands, threads)
        rho_out = band_density(bloch, z, density_basis)
        residual = coulomb_norm(rho_out - rho_in)

        trial = CrystalGroundState(mu0, rho_out, potential, bloch, z, 0.0, 0.0, residual)
        energy = crystal_energy(trial)["total_energy"]
        logger.debug("crystal scf %d: residual %.3e energy %.12f", iteration, residual, energy)
        if energy > previous_energy + 1e-12:
            logger.warning("crystal scf energy rose at iteration %d", iteration)
        previous_energy = energy

        if residual <= tol:
            break
        rho_in = rho_in + mix * (rho_out - rho_in)
    else:
        raise NoConvergence(
            f"crystal scf residual {residual:.3e} above tol {tol:.1e} after {max_iter} iterations"
        )

    rho0 = rho_out
    v0 = poisson_periodic(rho0 - mu0)
    bloch = diagonalize_bloch(v0, basis, bz, n_bands, threads)
    gap, fermi_level = check_gap(bloch, z)
    logger.info(
        "crystal scf converged in %d iterations (residual %.2e, gap %.6f Ha)",
        iteration, residual, gap,
    )
    return CrystalGroundState(
        mu0=mu0.with_kind(FieldKind.DENSITY),
        rho0=rho0,
        v0=v0,
        bloch=bloch,
        z=z,
        fermi_level=fermi_level,
        gap=gap,
        scf_residual=residual,
        iterations=iteration,
    )


def host_from_potential(
    v: PeriodicField,
    basis: PlaneWaveBasis,
    bz: BZMesh,
    z: int,
    n_bands: Optional[int] = None,
    threads: Optional[int] = None,
) -> CrystalGroundState:
    """
    Self-consistent host for a prescribed lattice potential.

    The bands of -1/2 Laplace + v are filled, and the nuclear density is
    reconstructed as mu0 = rho0 + Laplace(v) / (4 pi) so that
    v = poisson_periodic(rho0 - mu0) holds exactly. mu0 need not be
    nonnegative.
    """
    coeffs = v.coeffs.copy()
    coeffs[v.basis.zero_index] = 0.0
    v = PeriodicField(v.basis, coeffs, FieldKind.POTENTIAL)
    n_bands = n_bands or default_band_count(z, basis)
    bloch = diagonalize_bloch(v, basis, bz, n_bands, threads)
    gap, fermi_level = check_gap(bloch, z)
    rho0 = band_density(bloch, z, v.basis)
    mu0 = rho0 + laplacian(v).with_kind(FieldKind.DENSITY) * (1.0 / (4.0 * np.pi))
    v0 = poisson_periodic(rho0 - mu0)
    return CrystalGroundState(
        mu0=mu0, rho0=rho0, v0=v0, bloch=bloch, z=z,
        fermi_level=fermi_level, gap=gap, scf_residual=0.0,
    )
