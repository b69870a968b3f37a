"""
Periodic electrostatics.

This module handles:
1. The periodic Poisson solve with the zero-mean (jellium) convention
2. The Coulomb pairing D(f, g) and its norm
3. The dilation U_m nu = m^3 nu(m .) and its L2 adjoint
4. Reciprocal-space Coulomb kernels, periodic and truncated
"""

import logging
from typing import Optional

import numpy as np

from lattice_core.lattice import FieldKind, Lattice, PeriodicField, PlaneWaveBasis, copy_by_index
from utils.errors import DomainMismatch, IncommensurateGrids, NonNeutralSource, ResolutionLoss

logger = logging.getLogger(__name__)

FOUR_PI = 4.0 * np.pi
NEUTRALITY_TOL = 1e-10
RESOLUTION_TOL = 1e-6


def periodic_kernel(k2: np.ndarray) -> np.ndarray:
    """4 pi / |k|^2 with the k = 0 mode set to zero."""
    k2 = np.asarray(k2, dtype=float)
    out = np.zeros_like(k2)
    nonzero = k2 > 1e-14
    out[nonzero] = FOUR_PI / k2[nonzero]
    return out


def truncated_kernel(k2: np.ndarray, radius: float) -> np.ndarray:
    """
    Fourier transform of 1/|x| cut off at |x| = radius.

    Periodic convolution with this kernel reproduces free-space
    electrostatics for densities whose support has diameter below
    ``radius`` when the box is at least twice that size.
    """
    k2 = np.asarray(k2, dtype=float)
    k = np.sqrt(k2)
    out = np.full_like(k2, 2.0 * np.pi * radius**2)
    nonzero = k2 > 1e-14
    out[nonzero] = FOUR_PI * (1.0 - np.cos(radius * k[nonzero])) / k2[nonzero]
    return out


def laplacian(field: PeriodicField) -> PeriodicField:
    return PeriodicField(field.basis, -field.basis.g2 * field.coeffs, field.kind)


def coulomb_potential(source: PeriodicField) -> PeriodicField:
    """source * |x|^-1 in the jellium convention (no neutrality check)."""
    return PeriodicField(
        source.basis, periodic_kernel(source.basis.g2) * source.coeffs, FieldKind.POTENTIAL
    )


def poisson_periodic(
    source: PeriodicField, basis: Optional[PlaneWaveBasis] = None
) -> PeriodicField:
    """
    Solve -Laplace V = 4 pi source with periodic boundary conditions.

    Args:
        source: Locally neutral density-like field
        basis: Expected basis of the result (must match the source)

    Returns:
        The zero-mean potential V

    Raises:
        NonNeutralSource: If the source has a nonzero cell average
        DomainMismatch: If ``basis`` differs from the source basis
    """
    if basis is not None and not basis.same_as(source.basis):
        raise DomainMismatch("poisson_periodic: source and target bases differ")
    mean = source.coeffs[source.basis.zero_index]
    if abs(mean) > NEUTRALITY_TOL:
        raise NonNeutralSource(f"source has cell average {abs(mean):.3e}")
    return coulomb_potential(source)


def coulomb_D(f: PeriodicField, g: PeriodicField) -> float:
    """
    The Coulomb pairing 4 pi sum_{k != 0} conj(f_k) g_k / |k|^2 times the volume.

    Raises:
        DomainMismatch: If the two fields live on different bases
    """
    if not f.basis.same_as(g.basis):
        raise DomainMismatch("coulomb_D: fields live on different bases")
    weights = periodic_kernel(f.basis.g2)
    value = np.sum(weights * np.conj(f.coeffs) * g.coeffs)
    return float(np.real(value) * f.basis.volume)


def coulomb_norm(f: PeriodicField) -> float:
    return float(np.sqrt(max(coulomb_D(f, f), 0.0)))


def check_dilation(source: Lattice, target: Lattice, m: float) -> None:
    """Target box must be the source box scaled by 1/m."""
    if not 0.0 < m <= 1.0:
        raise IncommensurateGrids(f"dilation parameter must be in (0, 1], got {m}")
    if not target.is_close(source.scaled(1.0 / m), tol=1e-9):
        raise IncommensurateGrids(
            f"target box is not the source box scaled by 1/m (m = {m})"
        )


def dilate(nu: PeriodicField, m: float, target: PlaneWaveBasis) -> PeriodicField:
    """
    (U_m nu)(x) = m^3 nu(m x), from a box onto the box scaled by 1/m.

    Wave vectors keep their Miller indices and the coefficients pick up a
    factor m^3, so charge is preserved and D scales by m.

    Raises:
        IncommensurateGrids: If the target box is not the source box / m
        ResolutionLoss: If modes missing from the target carry more than
            1e-6 of the L2 mass
    """
    check_dilation(nu.basis.lattice, target.lattice, m)
    moved, lost = copy_by_index(nu.coeffs * m**3, nu.basis, target, nu.kind)
    if lost > RESOLUTION_TOL:
        raise ResolutionLoss(f"dilation drops {lost:.2e} of the L2 mass")
    return moved


def dilate_adjoint(field: PeriodicField, m: float, target: PlaneWaveBasis) -> PeriodicField:
    """(U_m^* f)(y) = f(y / m), from the dilated box back onto the original one."""
    check_dilation(target.lattice, field.basis.lattice, m)
    moved, _ = copy_by_index(field.coeffs, field.basis, target, field.kind)
    return moved
