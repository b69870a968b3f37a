"""
Microscopic oscillations of a slow electron in the periodic crystal.

This module handles:
1. The periodic corrector f_per solving -1/2 Laplace f = -V0 with zero mean
2. The positive cell mode u of -Laplace/(2m) + V0 and its eigenvalue
3. Convergence of E_per(m)/m and of u - 1 - m f_per as m -> 0
4. The exact splitting of the one-electron energy into a periodic part
   and a weighted macroscopic functional

Cell modes live on a full FFT grid of the unit cell. A macroscopic box is
commensurate when it contains an integer number of scaled cells m * a and
its grid is the same integer multiple of the cell grid; u(x/m) is then the
tiled cell array, and spectral derivatives of it are exact.
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg

from lattice_core.lattice import (
    FieldKind,
    PeriodicField,
    PlaneWaveBasis,
    grid_integral,
    grid_kinetic,
    spectral_gradient,
)
from utils.errors import ConfigError, DegenerateGroundState, IncommensurateGrids
from utils.fitting import fit_order

logger = logging.getLogger(__name__)

DEGENERACY_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class CellMode:
    """The oscillation triple (u, E_per(m), f_per) of one effective mass m."""

    m: float
    u: PeriodicField
    e_per_m: float
    f: PeriodicField
    e_per_limit: float
    spectral_gap: float
    residual: float

    @property
    def grid(self) -> PlaneWaveBasis:
        return self.u.basis

    @property
    def integral_v_f(self) -> float:
        """The cell integral of V0 f_per (the limit above times the cell volume)."""
        return self.e_per_limit * self.grid.volume

    def values(self) -> np.ndarray:
        return self.u.values()

    def to_dict(self) -> Dict[str, Any]:
        return {
            "m": self.m,
            "e_per_m": self.e_per_m,
            "e_per_over_m": self.e_per_m / self.m,
            "e_per_limit": self.e_per_limit,
            "integral_v_f": self.integral_v_f,
            "spectral_gap": self.spectral_gap,
            "residual": self.residual,
        }


def cell_grid(v0: PeriodicField, grid_dims: Optional[Sequence[int]] = None) -> PlaneWaveBasis:
    """Full FFT grid of the unit cell (default: the grid of the potential)."""
    return PlaneWaveBasis.full_grid(v0.basis.lattice, grid_dims or v0.basis.grid_dims)


def cell_values(field: PeriodicField, grid: PlaneWaveBasis) -> np.ndarray:
    """Real-space values of a cell field on a full cell grid."""
    moved, lost = field.transfer(grid)
    if lost > 0.0:
        raise ConfigError(f"cell grid {grid.grid_dims} drops {lost:.2e} of the field")
    return moved.values()


def solve_f_per(v0: PeriodicField) -> PeriodicField:
    """
    Zero-mean solution of -1/2 Laplace f = -V0.

    The mean of V0 is ignored, which is the same as solving with the
    zero-mean part of V0.
    """
    basis = v0.basis
    coeffs = np.zeros(basis.size, dtype=complex)
    nonzero = basis.g2 > 1e-14
    coeffs[nonzero] = -2.0 * v0.coeffs[nonzero] / basis.g2[nonzero]
    return PeriodicField(basis, coeffs, FieldKind.WAVEFUNCTION_WEIGHT)


def _cell_operator(v_grid: np.ndarray, grid: PlaneWaveBasis, m: float) -> np.ndarray:
    # circulant multiplication by V in the Fourier basis of the grid
    dims = np.asarray(grid.grid_dims)
    half = dims // 2
    diff = grid.gvectors[:, None, :] - grid.gvectors[None, :, :]
    wrapped = np.mod(diff + half, dims) - half
    v_hat = grid.from_grid(v_grid)
    operator = v_hat[grid.index_of(wrapped)]
    operator[np.diag_indices(grid.size)] += grid.g2 / (2.0 * m)
    return operator


def _polish(operator: np.ndarray, vector: np.ndarray, value: float, gap: float, steps: int = 3):
    shift = value - 1e-3 * max(gap, 1e-12)
    factor = scipy.linalg.lu_factor(operator - shift * np.eye(operator.shape[0]))
    for _ in range(steps):
        vector = scipy.linalg.lu_solve(factor, vector)
        vector /= np.linalg.norm(vector)
    value = float(np.real(np.vdot(vector, operator @ vector)))
    return vector, value


def solve_u_per(
    v0: PeriodicField, m: float, grid_dims: Optional[Sequence[int]] = None
) -> CellMode:
    """
    Positive ground mode of -Laplace/(2m) + V0 on the unit cell.

    Args:
        v0: Periodic crystal potential
        m: Effective mass parameter in (0, 1]
        grid_dims: Odd FFT grid of the cell (default: the grid of v0)

    Returns:
        CellMode with u > 0 and mean(u^2) = 1

    Raises:
        DegenerateGroundState: If the first two eigenvalues are closer than
            1e-10, or the computed mode changes sign
    """
    if not 0.0 < m <= 1.0:
        raise ConfigError(f"m must lie in (0, 1], got {m}")
    grid = cell_grid(v0, grid_dims)
    v_grid = cell_values(v0, grid)
    operator = _cell_operator(v_grid, grid, m)

    values, vectors = scipy.linalg.eigh(operator, subset_by_index=[0, 1])
    gap = float(values[1] - values[0])
    if gap < DEGENERACY_TOL:
        raise DegenerateGroundState(f"cell operator gap {gap:.3e} at m = {m}")
    vector, energy = _polish(operator, vectors[:, 0], float(values[0]), gap)
    residual = float(np.linalg.norm(operator @ vector - energy * vector))

    u_grid = grid.to_grid(vector)
    total = u_grid.sum()
    u_real = np.real(u_grid * np.conj(total) / abs(total))
    if u_real.min() <= 0.0:
        raise DegenerateGroundState(f"cell mode changes sign at m = {m}")
    u_real /= np.sqrt(np.mean(u_real**2))

    f = solve_f_per(v0)
    f_grid = cell_values(f, grid)
    e_limit = float(np.mean(v_grid * f_grid))
    logger.debug("cell mode m=%g: E=%.12e gap=%.3e residual=%.2e", m, energy, gap, residual)
    return CellMode(
        m=float(m),
        u=PeriodicField.from_values(grid, u_real, FieldKind.WAVEFUNCTION_WEIGHT),
        e_per_m=energy,
        f=f,
        e_per_limit=e_limit,
        spectral_gap=gap,
        residual=residual,
    )


def e_per_convergence(
    v0: PeriodicField, m_list: Sequence[float], grid_dims: Optional[Sequence[int]] = None
) -> Dict[str, Any]:
    """
    Tabulate E_per(m)/m against its limit and u - 1 - m f_per.

    Returns:
        Dictionary with ``rows`` (m, e_per_over_m, limit, difference,
        mode_error, spectral_gap) and order fits of both error columns
    """
    m_values = [float(m) for m in m_list]
    if any(b >= a for a, b in zip(m_values, m_values[1:])):
        raise ConfigError("m_list must be strictly decreasing")

    rows: List[Dict[str, float]] = []
    for m in m_values:
        mode = solve_u_per(v0, m, grid_dims)
        f_grid = cell_values(mode.f, mode.grid)
        mode_error = float(np.abs(mode.values() - 1.0 - m * f_grid).max())
        rows.append(
            {
                "m": m,
                "e_per_over_m": mode.e_per_m / m,
                "limit": mode.e_per_limit,
                "difference": mode.e_per_m / m - mode.e_per_limit,
                "mode_error": mode_error,
                "spectral_gap": mode.spectral_gap,
            }
        )
        logger.info("e_per row m=%g difference=%.3e", m, rows[-1]["difference"])

    report: Dict[str, Any] = {"rows": rows}
    if len(rows) >= 2:
        params = [r["m"] for r in rows]
        report["energy_fit"] = fit_order(params, [r["difference"] for r in rows], floor=1e-13)
        report["mode_fit"] = fit_order(params, [r["mode_error"] for r in rows], floor=1e-13)
    report["min_spectral_gap"] = min(r["spectral_gap"] for r in rows)
    return report


def commensurate_reps(macro: PlaneWaveBasis, cell: PlaneWaveBasis, m: float) -> np.ndarray:
    """
    Number of scaled cells per macroscopic box side.

    Raises:
        IncommensurateGrids: If the macro box is not an integer multiple of
            m times the cell, or its grid is not the same multiple of the
            cell grid
    """
    ratio = np.linalg.solve(m * cell.lattice.basis, macro.lattice.basis)
    reps = np.rint(np.diag(ratio)).astype(int)
    if np.any(reps < 1) or not np.allclose(ratio, np.diag(reps), atol=1e-9):
        raise IncommensurateGrids(f"macro box is not a multiple of the cell scaled by m = {m}")
    if tuple(reps * np.asarray(cell.grid_dims)) != tuple(macro.grid_dims):
        raise IncommensurateGrids(
            f"macro grid {macro.grid_dims} is not {tuple(reps)} times the cell grid {cell.grid_dims}"
        )
    return reps


def tiled(cell_array: np.ndarray, reps: np.ndarray) -> np.ndarray:
    return np.tile(cell_array, tuple(int(r) for r in reps))


def macro_energy(
    psi: np.ndarray, grid: PlaneWaveBasis, v0: PeriodicField, m: float, cell: PlaneWaveBasis
) -> Dict[str, float]:
    """Kinetic and periodic-potential terms of the one-electron energy on a macro box."""
    reps = commensurate_reps(grid, cell, m)
    v_macro = tiled(cell_values(v0, cell), reps)
    kinetic = grid_kinetic(psi, grid)
    potential = grid_integral(v_macro * np.abs(psi) ** 2, grid) / m
    return {"kinetic": kinetic, "potential": potential, "total": kinetic + potential}


def micro_energy(
    psi_tilde: np.ndarray, grid: PlaneWaveBasis, v0: PeriodicField, m: float, cell: PlaneWaveBasis
) -> Dict[str, float]:
    """
    The same energy written in microscopic units for psi~ = m^{3/2} psi(m .).

    ``grid`` is the microscopic box, an integer number of unit cells.
    """
    reps = commensurate_reps(grid, cell, 1.0)
    v_micro = tiled(cell_values(v0, cell), reps)
    kinetic = grid_kinetic(psi_tilde, grid) / (m * m)
    potential = grid_integral(v_micro * np.abs(psi_tilde) ** 2, grid) / m
    return {"kinetic": kinetic, "potential": potential, "total": kinetic + potential}


def modified_density(
    psi_pol: np.ndarray, grid: PlaneWaveBasis, cell: CellMode, m: float
) -> np.ndarray:
    """|u(x/m)|^2 |psi_pol(x)|^2, the density seen by the crystal."""
    reps = commensurate_reps(grid, cell.grid, m)
    weight = tiled(cell.values(), reps)
    return weight**2 * np.abs(psi_pol) ** 2


def _apply_kinetic(values: np.ndarray, grid: PlaneWaveBasis) -> np.ndarray:
    # -1/2 Laplace with the same spectral symbol as grid_kinetic
    k = grid.grid_frequencies()
    k2 = np.sum(k * k, axis=0)
    result = np.fft.ifftn(0.5 * k2 * np.fft.fftn(values))
    return np.real(result) if np.isrealobj(values) else result


def energy_decouple(
    psi: np.ndarray, grid: PlaneWaveBasis, cell: CellMode, m: float, v0: PeriodicField
) -> Tuple[np.ndarray, Dict[str, float]]:
    """
    Split the one-electron energy of psi into m^-1 E_per(m) and a weighted part.

    The weighted part is the ground-state form of the grid kinetic operator
    T with kernel t,

        1/2 sum_{x != y} (-t(x - y)) u(x) u(y) |psi_pol(x) - psi_pol(y)|^2
            = <psi, T psi> - sum_x |psi_pol|^2 u (T u),

    the discrete counterpart of 1/2 int |u|^2 |grad psi_pol|^2. Because u
    is an eigenvector of the same discrete operator, the split holds up to
    the eigen-residual of the cell mode.

    Args:
        psi: Normalized wavefunction on the macro grid
        grid: Full-grid basis of the macroscopic box
        cell: Cell mode computed for the same m
        m: Scale parameter
        v0: Periodic crystal potential

    Returns:
        (psi_pol, report). The report holds both sides of the identity
        kinetic + potential = E_per(m)/m + weighted_kinetic, their relative
        residual, and ``gradient_form``, the product-rule evaluation of
        1/2 int |u grad psi_pol|^2, which differs from the weighted part by
        aliasing only. The crystal interaction term is the same on both
        sides because |psi|^2 equals the modified density of psi_pol
        pointwise; ``density_mismatch`` records that.

    Raises:
        IncommensurateGrids: If the macro grid does not tile the cell grid
    """
    if abs(cell.m - m) > 1e-14:
        raise ConfigError(f"cell mode was computed for m = {cell.m}, not {m}")
    reps = commensurate_reps(grid, cell.grid, m)
    u_macro = tiled(cell.values(), reps)
    psi_pol = psi / u_macro

    lhs = macro_energy(psi, grid, v0, m, cell.grid)
    norm = grid_integral(np.abs(psi) ** 2, grid)

    weighted_kinetic = lhs["kinetic"] - grid_integral(
        np.abs(psi_pol) ** 2 * u_macro * _apply_kinetic(u_macro, grid), grid
    )
    periodic_term = norm * cell.e_per_m / m
    rhs = periodic_term + weighted_kinetic

    # u grad(psi_pol) written as grad(psi) - psi_pol grad(u)
    product_gradient = spectral_gradient(psi, grid) - psi_pol[None, ...] * spectral_gradient(u_macro, grid)
    gradient_form = 0.5 * grid_integral(np.sum(np.abs(product_gradient) ** 2, axis=0), grid)

    density_mismatch = float(np.abs(modified_density(psi_pol, grid, cell, m) - np.abs(psi) ** 2).max())
    scale = max(lhs["kinetic"] + abs(lhs["potential"]), abs(rhs), 1e-300)
    report = {
        "lhs": lhs["total"],
        "kinetic": lhs["kinetic"],
        "potential": lhs["potential"],
        "rhs": rhs,
        "periodic_term": periodic_term,
        "weighted_kinetic": weighted_kinetic,
        "gradient_form": gradient_form,
        "residual": abs(lhs["total"] - rhs) / scale,
        "density_mismatch": density_mismatch,
        "norm": norm,
    }
    return psi_pol, report
