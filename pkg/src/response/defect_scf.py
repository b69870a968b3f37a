"""
Nonlinear response of the crystal to an external defect charge.

This module handles:
1. The self-consistent projector difference Q in a supercell
2. The energy F_crys = Tr0((H0 - eF) Q) + 1/2 D(rho_Q, rho_Q) + D(nu, rho_Q)
3. Block decomposition, generalized trace and Q-norms of Q
4. The split Q = Q1 + R2 into first-order response and remainder
5. The rescaled self-consistent potential on a macroscopic box

Operators are dense matrices in the basis of computed Bloch states of the
supercell mesh (n_q * n_bands states); the unperturbed Hamiltonian is
diagonal there.
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, Optional

import numpy as np
import scipy.linalg

from lattice_core.coulomb import coulomb_D, coulomb_norm, coulomb_potential, dilate, dilate_adjoint, periodic_kernel
from lattice_core.lattice import FieldKind, PeriodicField, PlaneWaveBasis
from response.linear_response import ResponseContext, apply_K
from response.supercell import SupercellSpectrum
from utils.errors import ConfigError, GapClosure, NoConvergence

logger = logging.getLogger(__name__)

DEFAULT_DIMENSION_CAP = 4096
GAP_CLOSURE_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class DefectState:
    """Converged defect: Q in the Bloch basis, its density and the energy terms."""

    nu: PeriodicField
    q: np.ndarray
    occupied: np.ndarray
    rho_q: PeriodicField
    f_crys: float
    kinetic: float
    hartree: float
    cross: float
    tr0: float
    q_norm_report: Dict[str, float]
    scf_residual: float
    iterations: int
    fermi_level: float

    @property
    def q_blocks(self) -> Dict[str, np.ndarray]:
        """Q^{--}, Q^{-+}, Q^{+-}, Q^{++} relative to the unperturbed projector."""
        return q_blocks(self.q, self.occupied)

    def projector_identity_error(self) -> float:
        """max |Q^2 - (Q^{++} - Q^{--})|."""
        blocks = self.q_blocks
        target = np.zeros_like(self.q)
        occ = self.occupied
        emp = ~occ
        target[np.ix_(emp, emp)] = blocks["++"]
        target[np.ix_(occ, occ)] = -blocks["--"]
        return float(np.abs(self.q @ self.q - target).max())

    def summary(self) -> Dict[str, Any]:
        return {
            "f_crys": self.f_crys,
            "kinetic": self.kinetic,
            "hartree": self.hartree,
            "cross": self.cross,
            "tr0": self.tr0,
            "scf_residual": self.scf_residual,
            "iterations": self.iterations,
            "q_norm": self.q_norm_report.get("total", 0.0),
        }


def q_blocks(q: np.ndarray, occupied: np.ndarray) -> Dict[str, np.ndarray]:
    emp = ~occupied
    return {
        "--": q[np.ix_(occupied, occupied)],
        "-+": q[np.ix_(occupied, emp)],
        "+-": q[np.ix_(emp, occupied)],
        "++": q[np.ix_(emp, emp)],
    }


def _bloch_coefficients(spectrum: SupercellSpectrum) -> np.ndarray:
    # block-diagonal map from Bloch states to the plane waves G + q
    eigenvectors = spectrum.bloch.eigenvectors
    return scipy.linalg.block_diag(*eigenvectors)


def potential_matrix(spectrum: SupercellSpectrum, potential: np.ndarray) -> np.ndarray:
    """<a|V|b> between computed Bloch states for supercell coefficients V(J)."""
    table = spectrum.bloch_plane_wave_index()
    n_q, _, n_pw, _ = table.shape
    plane_wave = potential[table].transpose(0, 2, 1, 3).reshape(n_q * n_pw, n_q * n_pw)
    coefficients = _bloch_coefficients(spectrum)
    return coefficients.conj().T @ plane_wave @ coefficients


def operator_density(spectrum: SupercellSpectrum, operator: np.ndarray) -> PeriodicField:
    """Density of a one-body operator given in the Bloch basis."""
    table = spectrum.bloch_plane_wave_index()
    n_q, _, n_pw, _ = table.shape
    coefficients = _bloch_coefficients(spectrum)
    plane_wave = coefficients @ operator @ coefficients.conj().T
    plane_wave = plane_wave.reshape(n_q, n_pw, n_q, n_pw).transpose(0, 2, 1, 3)
    rho = np.zeros(spectrum.basis.size, dtype=complex)
    np.add.at(rho, table.reshape(-1), plane_wave.reshape(-1))
    rho /= spectrum.volume
    partner = spectrum.basis.index_of(-spectrum.basis.gvectors)
    rho = 0.5 * (rho + np.conj(rho[partner]))
    return PeriodicField(spectrum.basis, rho, FieldKind.DENSITY)


def _abs_weights(spectrum: SupercellSpectrum, fermi_level: float) -> np.ndarray:
    return np.sqrt(np.abs(spectrum.energies - fermi_level))


def _trace_norm(matrix: np.ndarray) -> float:
    if matrix.size == 0:
        return 0.0
    return float(np.abs(np.linalg.eigvalsh(0.5 * (matrix + matrix.conj().T))).sum())


def q_norm_report(
    q: np.ndarray, occupied: np.ndarray, spectrum: SupercellSpectrum, fermi_level: float
) -> Dict[str, float]:
    """
    The six Q-norm components and their sum.

    Gradients are replaced by |H0 - eF|^{1/2}, which is diagonal in the
    Bloch basis.
    """
    weights = _abs_weights(spectrum, fermi_level)
    blocks = q_blocks(q, occupied)
    emp = ~occupied
    w_occ = weights[occupied]
    w_emp = weights[emp]
    report = {
        "hilbert_schmidt": float(np.linalg.norm(q)),
        "trace_plus": _trace_norm(blocks["++"]),
        "trace_minus": _trace_norm(blocks["--"]),
        "weighted_hilbert_schmidt": float(np.linalg.norm(weights[:, None] * q)),
        "weighted_trace_plus": _trace_norm(w_emp[:, None] * blocks["++"] * w_emp[None, :]),
        "weighted_trace_minus": _trace_norm(w_occ[:, None] * blocks["--"] * w_occ[None, :]),
    }
    report["total"] = float(sum(report.values()))
    return report


def _check_dimension(spectrum: SupercellSpectrum, cap: int) -> None:
    if spectrum.n_states > cap:
        raise ConfigError(
            f"defect problem has dimension {spectrum.n_states}, above the cap {cap}"
        )


def _perturbed_projector(
    spectrum: SupercellSpectrum, potential: np.ndarray, fermi_level: float
) -> np.ndarray:
    hamiltonian = np.diag(spectrum.energies).astype(complex) + potential_matrix(spectrum, potential)
    values, vectors = np.linalg.eigh(hamiltonian)
    closest = float(np.abs(values - fermi_level).min())
    if closest < GAP_CLOSURE_TOL:
        raise GapClosure(f"perturbed level within {closest:.2e} of the Fermi level")
    below_mask = values < fermi_level
    expected = int(np.count_nonzero(spectrum.occupied_mask))
    count = int(np.count_nonzero(below_mask))
    if count != expected:
        raise GapClosure(f"{count} perturbed levels below the Fermi level, expected {expected}")
    below = vectors[:, below_mask]
    return below @ below.conj().T


def _assemble(
    ctx: ResponseContext,
    nu: PeriodicField,
    q: np.ndarray,
    rho_q: PeriodicField,
    fermi_level: float,
    residual: float,
    iterations: int,
) -> DefectState:
    spectrum = ctx.spectrum
    occupied = spectrum.occupied_mask
    kinetic = float(np.real(np.sum((spectrum.energies - fermi_level) * np.diag(q))))
    hartree = 0.5 * coulomb_D(rho_q, rho_q)
    cross = coulomb_D(nu, rho_q)
    blocks = q_blocks(q, occupied)
    tr0 = float(np.real(np.trace(blocks["++"]) + np.trace(blocks["--"])))
    return DefectState(
        nu=nu,
        q=q,
        occupied=occupied,
        rho_q=rho_q,
        f_crys=kinetic + hartree + cross,
        kinetic=kinetic,
        hartree=hartree,
        cross=cross,
        tr0=tr0,
        q_norm_report=q_norm_report(q, occupied, spectrum, fermi_level),
        scf_residual=residual,
        iterations=iterations,
        fermi_level=fermi_level,
    )


def scf_defect(
    ctx: ResponseContext,
    nu: PeriodicField,
    mix: float = 0.5,
    tol: float = 1e-10,
    max_iter: int = 200,
    fermi_level: Optional[float] = None,
    dimension_cap: int = DEFAULT_DIMENSION_CAP,
) -> DefectState:
    """
    Solve Q = 1(H0 + (rho_Q + nu) * |x|^-1 < eF) - 1(H0 < eF) by density mixing.

    Args:
        ctx: Response context fixing crystal, supercell and bands
        nu: External defect density on the supercell density basis
        mix: Linear mixing parameter in (0, 1]
        tol: Coulomb-norm tolerance on rho_out - rho_in
        max_iter: Iteration cap
        fermi_level: Chemical potential inside the gap (default: the crystal's)
        dimension_cap: Largest admissible number of Bloch states

    Returns:
        The converged DefectState, started from rho_Q = -K nu

    Raises:
        GapClosure: If a perturbed level comes within 1e-8 of the Fermi level
            or crosses it
        NoConvergence: If the residual stays above ``tol``
    """
    ctx.check_field(nu)
    if not 0.0 < mix <= 1.0:
        raise ConfigError(f"mix must lie in (0, 1], got {mix}")
    spectrum = ctx.spectrum
    _check_dimension(spectrum, dimension_cap)
    fermi = ctx.crystal.fermi_level if fermi_level is None else float(fermi_level)
    reference = np.diag(spectrum.occupied_mask.astype(float)).astype(complex)
    kernel = periodic_kernel(ctx.basis.g2)

    if coulomb_norm(nu) == 0.0:
        zero = np.zeros_like(reference)
        return _assemble(ctx, nu, zero, ctx.zeros(), fermi, 0.0, 0)

    rho_in = -apply_K(ctx, nu)
    residual = np.inf
    for iteration in range(1, max_iter + 1):
        potential = kernel * (rho_in.coeffs + nu.coeffs)
        q = _perturbed_projector(spectrum, potential, fermi) - reference
        rho_out = operator_density(spectrum, q)
        residual = coulomb_norm(rho_out - rho_in)
        logger.debug("defect scf %d: residual %.3e", iteration, residual)
        if residual <= tol:
            break
        rho_in = rho_in + mix * (rho_out - rho_in)
    else:
        raise NoConvergence(
            f"defect scf residual {residual:.3e} above tol {tol:.1e} after {max_iter} iterations"
        )

    state = _assemble(ctx, nu, q, rho_out, fermi, residual, iteration)
    logger.info(
        "defect scf converged in %d iterations: F_crys = %.10e (tr0 %.1e)",
        iteration, state.f_crys, state.tr0,
    )
    return state


def f_crys(ctx: ResponseContext, nu: PeriodicField, **kwargs: Any) -> float:
    """F_crys[nu] from a converged defect calculation."""
    return scf_defect(ctx, nu, **kwargs).f_crys


def tr0_charge(state: DefectState) -> float:
    """Generalized trace Tr Q^{++} + Tr Q^{--}."""
    return state.tr0


def decompose_resolvent(ctx: ResponseContext, state: DefectState) -> Dict[str, Any]:
    """
    Split Q into the first-order response Q1 to V = (rho_Q + nu) * |x|^-1 and R2 = Q - Q1.

    Returns:
        Dictionary with ``q1``, ``r2`` (Bloch-basis matrices) and their
        Q-norm reports ``q1_norm`` and ``r2_norm``
    """
    spectrum = ctx.spectrum
    occupied = state.occupied
    emp = ~occupied
    potential = periodic_kernel(ctx.basis.g2) * (state.rho_q.coeffs + state.nu.coeffs)
    v = potential_matrix(spectrum, potential)
    energies = spectrum.energies
    q1 = np.zeros_like(state.q)
    # Q1_{ln} = V_{ln} / (lambda_n - lambda_l), l empty, n occupied
    denominators = energies[occupied][None, :] - energies[emp][:, None]
    block = v[np.ix_(emp, occupied)] / denominators
    q1[np.ix_(emp, occupied)] = block
    q1[np.ix_(occupied, emp)] = block.conj().T
    r2 = state.q - q1
    fermi = state.fermi_level
    return {
        "q1": q1,
        "r2": r2,
        "q1_norm": q_norm_report(q1, occupied, spectrum, fermi),
        "r2_norm": q_norm_report(r2, occupied, spectrum, fermi),
    }


def rescaled_potential(state: DefectState, m: float, macro: PlaneWaveBasis) -> PeriodicField:
    """
    W_m = m^-1 U_m^*((U_m nu + rho_Q) * |x|^-1) on the macroscopic box.

    ``state.nu`` must already be the dilated defect U_m nu.
    """
    total = state.nu + state.rho_q
    potential = coulomb_potential(total)
    return dilate_adjoint(potential, m, macro) * (1.0 / m)


def defect_from_macro(ctx: ResponseContext, nu_macro: PeriodicField, m: float) -> PeriodicField:
    """U_m nu on the supercell density basis."""
    return dilate(nu_macro, m, ctx.basis)
