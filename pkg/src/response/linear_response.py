"""
First-order response of the Fermi sea to an external charge.

This module handles:
1. The response operator L nu = -rho_{Q1(nu)} from band sums
2. The screened operator K = 1 - (1 + L)^-1 by conjugate gradient
3. The quadratic energy F_aux = -1/2 D(nu, K nu)
4. The rescaled operator B_m on a macroscopic box
5. The leading-order kinetic-energy identity, in the supercell and for
   plain Hermitian matrices
"""

import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np

from crystal.crystal_scf import CrystalGroundState
from lattice_core.coulomb import (
    check_dilation,
    coulomb_D,
    coulomb_potential,
    dilate,
    dilate_adjoint,
    periodic_kernel,
)
from lattice_core.lattice import FieldKind, PeriodicField, PlaneWaveBasis
from response.supercell import SupercellSpectrum, build_supercell
from utils.errors import CGNoConvergence, ConfigError, DomainMismatch, InsufficientBands
from utils.fitting import fit_order

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class ResponseContext:
    """
    A crystal seen through one supercell, with the solver settings.

    ``n_empty`` counts unoccupied bands per k-point; None keeps every band
    of the plane-wave basis, which makes the band sums exact.
    """

    crystal: CrystalGroundState
    supercell: Tuple[int, int, int]
    n_empty: Optional[int] = None
    cg_tol: float = 1e-8
    cg_max_iter: int = 200
    tail_tol: float = 1e-6
    threads: Optional[int] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "supercell", tuple(int(r) for r in self.supercell))
        if self.n_empty is not None and self.n_empty < 1:
            raise ConfigError(f"n_empty must be >= 1, got {self.n_empty}")
        if self.cg_tol <= 0:
            raise ConfigError(f"cg_tol must be positive, got {self.cg_tol}")

    @cached_property
    def spectrum(self) -> SupercellSpectrum:
        return build_supercell(self.crystal, self.supercell, self.n_empty, self.threads)

    @property
    def basis(self) -> PlaneWaveBasis:
        return self.spectrum.basis

    def zeros(self) -> PeriodicField:
        return PeriodicField.zeros(self.basis, FieldKind.DENSITY)

    def check_field(self, nu: PeriodicField) -> None:
        if not nu.basis.same_as(self.basis):
            raise DomainMismatch("density is not on the supercell density basis")


def _symmetrize(basis: PlaneWaveBasis, coeffs: np.ndarray) -> np.ndarray:
    partner = basis.index_of(-basis.gvectors)
    return 0.5 * (coeffs + np.conj(coeffs[partner]))


def _response_coefficients(ctx: ResponseContext, potential: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    # rho_{Q1}(J) = sum_J' chi0(J, J') V(J'), computed class by class
    spectrum = ctx.spectrum
    rho = np.zeros(spectrum.basis.size, dtype=complex)
    tail = np.zeros(spectrum.basis.size, dtype=complex)
    if spectrum.n_occupied == 0:
        return rho, tail
    active = np.unique(spectrum.class_of(spectrum.basis.gvectors[np.abs(potential) > 0.0]))
    for kappa in active:
        members, chi, chi_last = spectrum.chi0_block(int(kappa))
        rho[members] = chi @ potential[members]
        tail[members] = chi_last @ potential[members]
    return rho, tail


def apply_L(ctx: ResponseContext, nu: PeriodicField) -> PeriodicField:
    """
    Linear response L nu = -rho_{Q1} for the potential V = nu * |x|^-1.

    Raises:
        InsufficientBands: If the last unoccupied band carries more than
            ``tail_tol`` of the result
    """
    ctx.check_field(nu)
    potential = periodic_kernel(ctx.basis.g2) * nu.coeffs
    rho, tail = _response_coefficients(ctx, potential)
    if not ctx.spectrum.all_bands:
        total = np.linalg.norm(rho)
        if total > 0.0 and np.linalg.norm(tail) > ctx.tail_tol * total:
            raise InsufficientBands(
                f"last band carries {np.linalg.norm(tail) / total:.2e} of the response"
            )
    return PeriodicField(ctx.basis, -_symmetrize(ctx.basis, rho), FieldKind.DENSITY)


def solve_dielectric(ctx: ResponseContext, nu: PeriodicField) -> Tuple[PeriodicField, int]:
    """
    Solve (1 + L) x = nu by conjugate gradient in the Coulomb inner product.

    The mean of x equals the mean of nu, which L never touches.

    Returns:
        (x, iterations)

    Raises:
        CGNoConvergence: If the Coulomb norm of the residual is not below
            cg_tol times that of nu after cg_max_iter iterations
    """
    ctx.check_field(nu)
    rhs_norm2 = coulomb_D(nu, nu)
    if rhs_norm2 <= 0.0 or ctx.crystal.z == 0:
        return nu, 0

    x = nu - apply_L(ctx, nu)
    residual = nu - x - apply_L(ctx, x)
    direction = residual
    rr = coulomb_D(residual, residual)
    threshold = ctx.cg_tol**2 * rhs_norm2
    iteration = 0
    while rr > threshold:
        if iteration >= ctx.cg_max_iter:
            raise CGNoConvergence(
                f"CG residual {np.sqrt(rr / rhs_norm2):.2e} after {iteration} iterations"
            )
        applied = direction + apply_L(ctx, direction)
        alpha = rr / coulomb_D(direction, applied)
        x = x + alpha * direction
        residual = residual - alpha * applied
        rr_new = coulomb_D(residual, residual)
        direction = residual + (rr_new / rr) * direction
        rr = rr_new
        iteration += 1
    logger.debug("dielectric CG converged in %d iterations", iteration)
    return x, iteration


def apply_K(ctx: ResponseContext, nu: PeriodicField) -> PeriodicField:
    """K nu = nu - (1 + L)^-1 nu."""
    x, _ = solve_dielectric(ctx, nu)
    return nu - x


def f_aux(ctx: ResponseContext, nu: PeriodicField) -> float:
    """Second-order defect energy -1/2 D(nu, K nu)."""
    return -0.5 * coulomb_D(nu, apply_K(ctx, nu))


def macro_basis(ctx: ResponseContext, m: float) -> PlaneWaveBasis:
    """The supercell Miller set on the macroscopic box, m times the supercell."""
    return PlaneWaveBasis(
        ctx.basis.lattice.scaled(m), ctx.basis.ecut / m**2, ctx.basis.gvectors, ctx.basis.grid_dims
    )


def apply_B_m(ctx: ResponseContext, nu: PeriodicField, m: float) -> PeriodicField:
    """
    B_m(nu) = m^-1 U_m^*(|x|^-1 * (1 + L)^-1 U_m nu) on the macroscopic box.

    The macroscopic box is the supercell scaled by m.

    Raises:
        IncommensurateGrids: If nu's box is not m times the supercell
    """
    check_dilation(nu.basis.lattice, ctx.basis.lattice, m)
    micro = dilate(nu, m, ctx.basis)
    screened, _ = solve_dielectric(ctx, micro)
    potential = coulomb_potential(screened)
    return dilate_adjoint(potential, m, nu.basis) * (1.0 / m)


def b_m_quadratic(ctx: ResponseContext, nu: PeriodicField, m: float) -> float:
    """The self-interaction int B_m(nu) nu."""
    return apply_B_m(ctx, nu, m).inner(nu)


def response_matrix_elements(ctx: ResponseContext, potential: np.ndarray) -> Dict[str, np.ndarray]:
    """
    <l|V|n> for every unoccupied l and occupied n coupled by V.

    Args:
        potential: Supercell coefficients of a real potential

    Returns:
        Dictionary with ``elements``, ``lambda_empty``, ``lambda_occupied``,
        ``empty_state`` and ``occupied_state`` (flat state numbers)
    """
    spectrum = ctx.spectrum
    elements, empty, occupied = [], [], []
    if spectrum.n_occupied > 0:
        active = np.unique(spectrum.class_of(spectrum.basis.gvectors[np.abs(potential) > 0.0]))
        for kappa in active:
            block = spectrum.pair_block(int(kappa))
            mask = block.occupied_first
            # pair (n occupied, l empty) in class j_l - j_n gives <l|V|n>
            values = block.coefficients[:, mask].conj().T @ potential[block.j_index]
            elements.append(values)
            empty.append(block.empty_state[mask])
            occupied.append(block.occupied_state[mask])
    if elements:
        elements_arr = np.concatenate(elements)
        empty_arr = np.concatenate(empty)
        occupied_arr = np.concatenate(occupied)
    else:
        elements_arr = np.zeros(0, dtype=complex)
        empty_arr = occupied_arr = np.zeros(0, dtype=int)
    energies = spectrum.energies
    return {
        "elements": elements_arr,
        "empty_state": empty_arr,
        "occupied_state": occupied_arr,
        "lambda_empty": energies[empty_arr],
        "lambda_occupied": energies[occupied_arr],
    }


def kinetic_identity_residual(ctx: ResponseContext, nu: PeriodicField) -> float:
    """
    Relative gap between Tr(|H0 - eF| Q1^2) and -1/2 Tr0(Q1 V).

    The left side comes from the matrix elements of V between occupied and
    empty states; the right side is 1/2 D(nu, L nu) from the response
    matrix. Returns 0 when both vanish.
    """
    ctx.check_field(nu)
    potential = periodic_kernel(ctx.basis.g2) * nu.coeffs
    data = response_matrix_elements(ctx, potential)
    fermi = ctx.spectrum.fermi_level
    q1 = data["elements"] / (data["lambda_occupied"] - data["lambda_empty"])
    weights = np.abs(data["lambda_empty"] - fermi) + np.abs(data["lambda_occupied"] - fermi)
    lhs = float(np.sum(weights * np.abs(q1) ** 2))
    rhs = 0.5 * coulomb_D(nu, apply_L(ctx, nu))
    scale = max(abs(lhs), abs(rhs))
    if scale == 0.0:
        return 0.0
    return abs(lhs - rhs) / scale


def finite_matrix_kinetic_check(
    size: int = 20,
    t_values: Sequence[float] = (1e-1, 5e-2, 2.5e-2, 1.25e-2),
    seed: int = 0,
    n_occupied: Optional[int] = None,
) -> Dict[str, Any]:
    """
    The kinetic identity for a gapped Hermitian matrix A perturbed by tB.

    Q_t is the exact projector difference 1(A + tB < 0) - 1(A < 0); the
    residual |Tr(|A| Q_t^2) / t^2 + 1/2 Tr(B Q_t) / t| relative to the
    first term vanishes linearly in t.

    Returns:
        Dictionary with ``rows`` (t, residual) and the fitted ``order``
    """
    rng = np.random.default_rng(seed)
    n_occ = size // 2 if n_occupied is None else n_occupied
    spectrum = np.concatenate(
        [-1.0 - rng.random(n_occ), 1.0 + rng.random(size - n_occ)]
    )
    unitary, _ = np.linalg.qr(rng.normal(size=(size, size)) + 1j * rng.normal(size=(size, size)))
    a = (unitary * spectrum) @ unitary.conj().T
    b = rng.normal(size=(size, size)) + 1j * rng.normal(size=(size, size))
    b = 0.5 * (b + b.conj().T)
    b /= np.linalg.norm(b, 2)

    def projector(matrix: np.ndarray) -> np.ndarray:
        values, vectors = np.linalg.eigh(matrix)
        below = vectors[:, values < 0.0]
        return below @ below.conj().T

    abs_a = (unitary * np.abs(spectrum)) @ unitary.conj().T
    reference = projector(a)
    rows = []
    for t in t_values:
        q = projector(a + t * b) - reference
        kinetic = float(np.real(np.trace(abs_a @ q @ q))) / t**2
        linear = 0.5 * float(np.real(np.trace(b @ q))) / t
        rows.append({"t": float(t), "residual": abs(kinetic + linear) / abs(kinetic)})
    fit = fit_order([r["t"] for r in rows], [r["residual"] for r in rows])
    return {"rows": rows, "order": fit["order"]}
