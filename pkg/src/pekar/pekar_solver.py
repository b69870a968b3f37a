"""
Anisotropic Pekar polaron on a macroscopic periodic box.

This module handles:
1. The Pekar energy 1/2 int |grad psi|^2 + F^P[|psi|^2]
2. Its mean-field operator, Lagrange multiplier and Euler-Lagrange residual
3. Ground states by kinetic-preconditioned normalized gradient flow

Wavefunctions are real arrays of grid values on a full-grid basis of the
box. By default the Coulomb kernels are truncated so a localized polaron
does not see its periodic images; the jellium kernel is used when energies
are compared with supercell quantities.
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from lattice_core.lattice import (
    FieldKind,
    Lattice,
    PeriodicField,
    PlaneWaveBasis,
    grid_integral,
    grid_kinetic,
)
from response.dielectric import (
    DielectricMatrix,
    coulomb_kernel,
    dielectric_kernel,
    pekar_interaction,
    pekar_interaction_real_space,
)
from utils.errors import BoxTooSmall, ConfigError, NoBinding, NoConvergence

logger = logging.getLogger(__name__)

RECENTER_EVERY = 50
SHELL_FRACTION = 0.1
SHELL_MASS_TOL = 1e-6
ROUNDOFF = 1e-13


@dataclass(frozen=True, eq=False)
class PekarState:
    """Normalized Pekar minimizer with its energy terms."""

    psi: np.ndarray
    grid: PlaneWaveBasis
    eps: DielectricMatrix
    energy: float
    kinetic: float
    interaction: float
    multiplier: float
    residual: float
    iterations: int = 0
    kernel: str = "isolated"

    @property
    def density(self) -> np.ndarray:
        return self.psi**2

    def virial_residual(self) -> float:
        """|2 T + F^P| / |E|, zero at a dilation-stationary point."""
        return abs(2.0 * self.kinetic + self.interaction) / max(abs(self.energy), 1e-300)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "status": "success",
            "energy": self.energy,
            "kinetic": self.kinetic,
            "interaction": self.interaction,
            "multiplier": self.multiplier,
            "residual": self.residual,
            "iterations": self.iterations,
            "virial_residual": self.virial_residual(),
            "kernel": self.kernel,
            "eps": self.eps.eps.tolist(),
        }


def normalize(psi: np.ndarray, grid: PlaneWaveBasis) -> np.ndarray:
    return psi / np.sqrt(grid_integral(np.abs(psi) ** 2, grid))


def density_field(psi: np.ndarray, grid: PlaneWaveBasis) -> PeriodicField:
    return PeriodicField.from_values(grid, np.abs(psi) ** 2, FieldKind.DENSITY)


def pekar_energy(
    psi: np.ndarray, grid: PlaneWaveBasis, eps: DielectricMatrix, kernel: str = "isolated"
) -> Tuple[float, float, float]:
    """
    Pekar energy of a normalized wavefunction.

    Returns:
        (total, kinetic, interaction)
    """
    kinetic = grid_kinetic(psi, grid)
    interaction = pekar_interaction(density_field(psi, grid), eps, kernel)
    return kinetic + interaction, kinetic, interaction


def pekar_energy_check(
    psi: np.ndarray, grid: PlaneWaveBasis, eps: DielectricMatrix, kernel: str = "isolated"
) -> float:
    """Gap between the Fourier and real-space evaluations of F^P[|psi|^2]."""
    rho = density_field(psi, grid)
    return abs(pekar_interaction(rho, eps, kernel) - pekar_interaction_real_space(rho, eps, kernel))


def mean_field_potential(
    psi: np.ndarray, grid: PlaneWaveBasis, eps: DielectricMatrix, kernel: str = "isolated"
) -> np.ndarray:
    """Phi = W_rho - rho * |x|^-1 for rho = |psi|^2, as grid values."""
    rho_hat = np.fft.fftn(np.abs(psi) ** 2) / grid.n_grid
    box = np.zeros(grid.grid_dims, dtype=complex)
    multiplier = dielectric_kernel(grid, eps, kernel) - coulomb_kernel(grid, kernel)
    box[grid.grid_index] = multiplier * rho_hat[grid.grid_index]
    return np.real(np.fft.ifftn(box) * grid.n_grid)


def _kinetic_symbol(grid: PlaneWaveBasis) -> np.ndarray:
    k = grid.grid_frequencies()
    return 0.5 * np.sum(k * k, axis=0)


def apply_mean_field(psi: np.ndarray, potential: np.ndarray, grid: PlaneWaveBasis) -> np.ndarray:
    kinetic = np.real(np.fft.ifftn(_kinetic_symbol(grid) * np.fft.fftn(psi)))
    return kinetic + potential * psi


def energy_gradient(
    psi: np.ndarray, grid: PlaneWaveBasis, eps: DielectricMatrix, kernel: str = "isolated"
) -> np.ndarray:
    """L2 gradient 2 h_psi psi of the unconstrained energy, as grid values."""
    potential = mean_field_potential(psi, grid, eps, kernel)
    return 2.0 * apply_mean_field(psi, potential, grid)


def euler_lagrange(
    psi: np.ndarray, grid: PlaneWaveBasis, eps: DielectricMatrix, kernel: str = "isolated"
) -> Tuple[float, np.ndarray]:
    """Multiplier lambda = <psi, h psi> and the residual h psi - lambda psi."""
    potential = mean_field_potential(psi, grid, eps, kernel)
    h_psi = apply_mean_field(psi, potential, grid)
    multiplier = grid_integral(psi * h_psi, grid)
    return multiplier, h_psi - multiplier * psi


def gaussian_trial(grid: PlaneWaveBasis, width: float = 1.0) -> np.ndarray:
    """Normalized isotropic Gaussian at the box center."""
    points = grid.grid_points()
    center = grid.lattice.basis @ np.full(3, 0.5)
    r2 = np.sum((points - center) ** 2, axis=-1)
    return normalize(np.exp(-r2 / (2.0 * width**2)), grid)


def _fractional_axes(grid: PlaneWaveBasis) -> List[np.ndarray]:
    return [np.arange(d) / d for d in grid.grid_dims]


def recenter(psi: np.ndarray, grid: PlaneWaveBasis) -> np.ndarray:
    """Roll the grid so the circular centroid of |psi|^2 sits at the box center."""
    frac = np.linalg.solve(grid.lattice.basis, centroid(psi, grid))
    shifts = [int(np.rint((0.5 - f) * d)) for f, d in zip(frac, grid.grid_dims)]
    return np.roll(psi, shifts, axis=(0, 1, 2))


def shell_mass(psi: np.ndarray, grid: PlaneWaveBasis, fraction: float = SHELL_FRACTION) -> float:
    """Mass of |psi|^2 whose fractional distance to the center exceeds 1/2 - fraction on some axis."""
    axes = np.meshgrid(*_fractional_axes(grid), indexing="ij")
    outer = np.zeros(grid.grid_dims, dtype=bool)
    for frac in axes:
        outer |= np.abs(frac - 0.5) > 0.5 - fraction
    return grid_integral(np.where(outer, np.abs(psi) ** 2, 0.0), grid)


def solve_pekar_ground(
    eps: DielectricMatrix,
    grid: PlaneWaveBasis,
    tol: float = 1e-8,
    max_iter: int = 20000,
    seed: int = 0,
    kernel: str = "isolated",
    initial: Optional[np.ndarray] = None,
    perturbation: float = 0.0,
    width: float = 1.0,
    check_box: bool = True,
) -> PekarState:
    """
    Minimize the Pekar functional over normalized wavefunctions.

    Args:
        eps: Dielectric matrix (eigenvalues >= 1, not the identity)
        grid: Full-grid basis of the macroscopic box
        tol: L2 tolerance on the Euler-Lagrange residual
        max_iter: Iteration cap
        seed: Seed of the optional random perturbation of the start
        kernel: "isolated" or "periodic" Coulomb kernels
        initial: Optional starting wavefunction (default: Gaussian of ``width``)
        perturbation: Relative size of random noise added to the start
        check_box: Reject states that reach the outer shell of the box;
            off for torus problems where spreading over the box is allowed

    Returns:
        PekarState at a local minimizer, centered in the box

    Raises:
        NoBinding: If eps is the identity, where the infimum 0 is not attained
        NoConvergence: If the residual stays above ``tol``
        BoxTooSmall: If more than 1e-6 of the mass lies in the outer shell
    """
    if eps.is_identity(1e-12):
        raise NoBinding("dielectric matrix is the identity: the Pekar energy is 0 and not attained")
    if eps.eigenvalues.min() < 1.0 - 1e-12:
        raise ConfigError(f"dielectric matrix has eigenvalues below 1: {eps.eigenvalues}")

    psi = gaussian_trial(grid, width) if initial is None else np.real(np.asarray(initial, dtype=complex))
    if perturbation > 0.0:
        rng = np.random.default_rng(seed)
        psi = psi * (1.0 + perturbation * rng.standard_normal(psi.shape))
    psi = normalize(psi, grid)

    symbol = _kinetic_symbol(grid)
    energy = pekar_energy(psi, grid, eps, kernel)[0]
    step = 1.0
    residual_norm = np.inf
    iteration = 0
    for iteration in range(1, max_iter + 1):
        multiplier, residual = euler_lagrange(psi, grid, eps, kernel)
        residual_norm = np.sqrt(grid_integral(residual**2, grid))
        if residual_norm <= tol:
            break

        shift = max(abs(multiplier), 1e-3)
        direction = -np.real(np.fft.ifftn(np.fft.fftn(residual) / (symbol + shift)))
        direction -= grid_integral(direction * psi, grid) * psi

        while True:
            trial = normalize(psi + step * direction, grid)
            trial_energy = pekar_energy(trial, grid, eps, kernel)[0]
            if trial_energy <= energy + ROUNDOFF * abs(energy) or step < 1e-12:
                break
            step *= 0.5
        if trial_energy > energy + ROUNDOFF * abs(energy):
            raise NoConvergence(f"line search failed at iteration {iteration}")
        psi, energy = trial, trial_energy
        step = min(2.0 * step, 4.0)

        if iteration % RECENTER_EVERY == 0:
            psi = recenter(psi, grid)
        logger.debug("pekar %d: energy %.12e residual %.3e", iteration, energy, residual_norm)
    else:
        raise NoConvergence(
            f"Pekar residual {residual_norm:.3e} above tol {tol:.1e} after {max_iter} iterations"
        )

    psi = recenter(psi, grid)
    if grid_integral(psi * gaussian_trial(grid, width), grid) < 0.0:
        psi = -psi
    outer = shell_mass(psi, grid)
    if check_box and outer > SHELL_MASS_TOL:
        raise BoxTooSmall(f"{outer:.2e} of the polaron mass lies in the outer shell of the box")

    total, kinetic, interaction = pekar_energy(psi, grid, eps, kernel)
    multiplier, _ = euler_lagrange(psi, grid, eps, kernel)
    logger.info("Pekar ground state: E = %.10f after %d iterations", total, iteration)
    return PekarState(
        psi=psi,
        grid=grid,
        eps=eps,
        energy=total,
        kinetic=kinetic,
        interaction=interaction,
        multiplier=multiplier,
        residual=float(residual_norm),
        iterations=iteration,
        kernel=kernel,
    )


def cubic_box(length: float, points: int) -> PlaneWaveBasis:
    """Full-grid basis of a cubic box with an odd number of points per side."""
    if points % 2 == 0:
        points += 1
    return PlaneWaveBasis.full_grid(Lattice.cubic(length), (points,) * 3)


def centroid(psi: np.ndarray, grid: PlaneWaveBasis) -> np.ndarray:
    """Cartesian circular centroid of |psi|^2."""
    density = np.abs(psi) ** 2
    frac_centroid = []
    for axis, frac in enumerate(_fractional_axes(grid)):
        marginal = density.sum(axis=tuple(a for a in range(3) if a != axis))
        angle = np.angle(np.sum(marginal * np.exp(2j * np.pi * frac)))
        frac_centroid.append((angle / (2.0 * np.pi)) % 1.0)
    return grid.lattice.basis @ np.asarray(frac_centroid)


def interpolate(values: np.ndarray, grid: PlaneWaveBasis, points: np.ndarray) -> np.ndarray:
    """Trigonometric interpolation of grid values at Cartesian points (P, 3)."""
    coeffs = (np.fft.fftn(values) / grid.n_grid).reshape(-1)
    k = grid.grid_frequencies().reshape(3, -1)
    return np.real(np.exp(1j * (points @ k)) @ coeffs)


def _sphere_directions(count: int) -> np.ndarray:
    index = np.arange(count) + 0.5
    polar = np.arccos(1.0 - 2.0 * index / count)
    azimuth = np.pi * (1.0 + np.sqrt(5.0)) * index
    return np.stack(
        [np.sin(polar) * np.cos(azimuth), np.sin(polar) * np.sin(azimuth), np.cos(polar)], axis=1
    )


def radial_symmetry_error(
    state: PekarState, radii: Optional[Sequence[float]] = None, n_directions: int = 26
) -> Dict[str, Any]:
    """
    Angular spread of |psi|^2 on spheres about its centroid.

    The density is interpolated spectrally on ``n_directions`` points per
    sphere; the error of a sphere is the standard deviation over the
    directions divided by the mean.

    Returns:
        Dictionary with the radii, the per-sphere errors and their maximum
    """
    center = centroid(state.psi, state.grid)
    if radii is None:
        points = state.grid.grid_points() - center
        spread = np.sqrt(grid_integral(np.sum(points**2, axis=-1) * state.density, state.grid))
        radii = spread * np.array([0.25, 0.5, 1.0, 1.5])
    directions = _sphere_directions(n_directions)
    errors = []
    for radius in radii:
        samples = interpolate(state.psi, state.grid, center + radius * directions) ** 2
        errors.append(float(samples.std() / max(abs(samples.mean()), 1e-300)))
    return {"radii": [float(r) for r in radii], "errors": errors, "max_error": max(errors)}


def permuted_eps(eps: DielectricMatrix, permutation: Sequence[int]) -> DielectricMatrix:
    """eps conjugated by an axis permutation."""
    p = np.eye(3)[list(permutation)]
    return DielectricMatrix(p @ eps.eps @ p.T, {"source": "permuted"})
