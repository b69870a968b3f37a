"""
Trial states and energies of the many-polaron Pekar problem.

This module handles:
1. Fermionic trial states: Slater determinants of orbitals, or explicit
   two-particle grid functions
2. The N-body Pekar energy: kinetic + pair repulsion + F^P of the density
3. Two-orbital variational witnesses compared with twice the one-body energy

Only energies of supplied states are evaluated; nothing here minimizes
over N-body states.
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, Optional

import numpy as np
from scipy.sparse.linalg import LinearOperator, eigsh

from lattice_core.lattice import FieldKind, PeriodicField, PlaneWaveBasis, grid_integral, grid_kinetic
from pekar.pekar_solver import (
    PekarState,
    apply_mean_field,
    mean_field_potential,
    solve_pekar_ground,
)
from response.dielectric import DielectricMatrix, coulomb_kernel, pekar_interaction
from utils.errors import ConfigError, InvariantViolation

logger = logging.getLogger(__name__)

ANTISYMMETRY_TOL = 1e-12


def _kernel_box(grid: PlaneWaveBasis, kernel: str) -> np.ndarray:
    box = np.zeros(grid.grid_dims)
    box[grid.grid_index] = coulomb_kernel(grid, kernel)
    return box


def _pair_coulomb(f: np.ndarray, g: np.ndarray, grid: PlaneWaveBasis, kernel_box: np.ndarray) -> float:
    """int int conj(f(x)) g(y) / |x - y| for grid functions on the box."""
    f_hat = np.fft.fftn(f) / grid.n_grid
    g_hat = np.fft.fftn(g) / grid.n_grid
    return float(np.real(np.sum(kernel_box * np.conj(f_hat) * g_hat))) * grid.volume


@dataclass(frozen=True, eq=False)
class ManyBodyTrialState:
    """
    An antisymmetric N-electron trial state on a macroscopic box.

    ``kind`` is "slater" (``orbitals`` of shape (n, *grid_dims), made
    orthonormal on construction) or "grid2" (``amplitude`` of shape
    (*grid_dims, *grid_dims), antisymmetric and normalized).
    """

    grid: PlaneWaveBasis
    kind: str
    orbitals: Optional[np.ndarray] = None
    amplitude: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        dims = self.grid.grid_dims
        if self.kind == "slater":
            if self.orbitals is None or self.orbitals.ndim != 4 or self.orbitals.shape[1:] != dims:
                raise ConfigError(f"Slater orbitals must have shape (n, {dims})")
            if self.orbitals.shape[0] < 2:
                raise ConfigError("many-body trial states need at least 2 electrons")
            flat = self.orbitals.reshape(self.orbitals.shape[0], -1).T
            q, _ = np.linalg.qr(flat)
            scale = np.sqrt(self.grid.n_grid / self.grid.volume)
            orbitals = (q.T * scale).reshape(self.orbitals.shape)
            if np.isrealobj(self.orbitals):
                orbitals = np.real(orbitals)
            object.__setattr__(self, "orbitals", orbitals)
        elif self.kind == "grid2":
            if self.amplitude is None or self.amplitude.shape != dims + dims:
                raise ConfigError(f"two-particle amplitude must have shape {dims + dims}")
            swapped = np.transpose(self.amplitude, (3, 4, 5, 0, 1, 2))
            scale = float(np.abs(self.amplitude).max()) or 1.0
            if np.abs(self.amplitude + swapped).max() > ANTISYMMETRY_TOL * scale:
                raise InvariantViolation("two-particle amplitude is not antisymmetric under exchange")
            weight = (self.grid.volume / self.grid.n_grid) ** 2
            norm = np.sqrt(np.sum(np.abs(self.amplitude) ** 2) * weight)
            if norm == 0.0:
                raise ConfigError("two-particle amplitude vanishes")
            object.__setattr__(self, "amplitude", self.amplitude / norm)
        else:
            raise ConfigError(f"unknown trial kind {self.kind!r}; choose 'slater' or 'grid2'")

    @classmethod
    def slater(cls, grid: PlaneWaveBasis, orbitals: np.ndarray) -> "ManyBodyTrialState":
        return cls(grid, "slater", orbitals=np.asarray(orbitals))

    @classmethod
    def from_orbital_pair(
        cls, grid: PlaneWaveBasis, first: np.ndarray, second: np.ndarray
    ) -> "ManyBodyTrialState":
        """Explicit amplitude (phi_1(x) phi_2(y) - phi_2(x) phi_1(y)) / sqrt 2."""
        amplitude = (
            np.multiply.outer(first, second) - np.multiply.outer(second, first)
        ) / np.sqrt(2.0)
        return cls(grid, "grid2", amplitude=amplitude)

    @property
    def n(self) -> int:
        if self.kind == "slater":
            return int(self.orbitals.shape[0])
        return 2

    def density(self) -> np.ndarray:
        """One-body density rho_Psi, integrating to n."""
        if self.kind == "slater":
            return np.sum(np.abs(self.orbitals) ** 2, axis=0)
        weight = self.grid.volume / self.grid.n_grid
        return 2.0 * np.sum(np.abs(self.amplitude) ** 2, axis=(3, 4, 5)) * weight


def _grid2_kinetic(state: ManyBodyTrialState) -> float:
    grid = state.grid
    transformed = np.fft.fftn(state.amplitude) / grid.n_grid**2
    k = grid.grid_frequencies()
    k2 = np.sum(k * k, axis=0)
    symbol = np.add.outer(k2, k2)
    return 0.5 * grid.volume**2 * float(np.sum(symbol * np.abs(transformed) ** 2))


def _grid2_repulsion(state: ManyBodyTrialState, kernel: str) -> float:
    # int int P(x, y) K(x - y) = |box| sum_k P(-k, k) K(k)
    grid = state.grid
    pair = np.abs(state.amplitude) ** 2
    transformed = np.fft.fftn(pair) / grid.n_grid**2
    dims = grid.grid_dims
    minus = tuple(np.mod(-np.arange(d), d) for d in dims)
    index = np.meshgrid(*minus, indexing="ij") + np.meshgrid(*[np.arange(d) for d in dims], indexing="ij")
    diagonal = transformed[tuple(index)]
    return float(np.real(np.sum(diagonal * _kernel_box(grid, kernel)))) * grid.volume


def _slater_repulsion(state: ManyBodyTrialState, kernel: str) -> float:
    kernel_box = _kernel_box(state.grid, kernel)
    orbitals = state.orbitals
    total = 0.0
    for i in range(state.n):
        for j in range(i + 1, state.n):
            rho_i = np.abs(orbitals[i]) ** 2
            rho_j = np.abs(orbitals[j]) ** 2
            exchange = np.conj(orbitals[i]) * orbitals[j]
            direct = _pair_coulomb(rho_i, rho_j, state.grid, kernel_box)
            total += direct - _pair_coulomb(exchange, exchange, state.grid, kernel_box)
    return total


def pekar_energy_nbody(
    trial: ManyBodyTrialState, eps: DielectricMatrix, kernel: str = "isolated"
) -> Dict[str, float]:
    """
    N-body Pekar energy of a trial state.

    Returns:
        Dictionary with ``kinetic``, ``repulsion``, ``interaction``
        (F^P of the one-body density) and ``total``, an upper bound on the
        N-polaron ground-state energy
    """
    if trial.kind == "slater":
        kinetic = sum(grid_kinetic(phi, trial.grid) for phi in trial.orbitals)
        repulsion = _slater_repulsion(trial, kernel)
    else:
        kinetic = _grid2_kinetic(trial)
        repulsion = _grid2_repulsion(trial, kernel)
    rho = PeriodicField.from_values(trial.grid, trial.density(), FieldKind.DENSITY)
    interaction = pekar_interaction(rho, eps, kernel)
    return {
        "kinetic": float(kinetic),
        "repulsion": float(repulsion),
        "interaction": float(interaction),
        "total": float(kinetic + repulsion + interaction),
    }


def mean_field_orbitals(state: PekarState, count: int = 2, tol: float = 1e-10) -> Dict[str, Any]:
    """Lowest eigenpairs of -1/2 Laplacian + Phi for the one-polaron mean field."""
    grid = state.grid
    potential = mean_field_potential(state.psi, grid, state.eps, state.kernel)
    size = grid.n_grid

    def matvec(vector: np.ndarray) -> np.ndarray:
        return apply_mean_field(vector.reshape(grid.grid_dims), potential, grid).reshape(-1)

    operator = LinearOperator((size, size), matvec=matvec, dtype=float)
    values, vectors = eigsh(operator, k=count, which="SA", tol=tol, v0=state.psi.reshape(-1))
    order = np.argsort(values)
    orbitals = vectors[:, order].T.reshape((count,) + grid.grid_dims)
    return {"eigenvalues": values[order], "orbitals": orbitals}


def binding_witness(
    eps: DielectricMatrix,
    grid: PlaneWaveBasis,
    state: Optional[PekarState] = None,
    kernel: str = "isolated",
    **solver_kwargs: Any,
) -> Dict[str, Any]:
    """
    Two-electron Slater trial from the one-polaron mean field.

    The two lowest orbitals of the mean-field operator of the one-polaron
    minimizer form the trial; its energy is an upper bound on E^P(2) and is
    reported next to 2 E^P(1). A trial below 2 E^P(1) witnesses binding.
    """
    if state is None:
        state = solve_pekar_ground(eps, grid, kernel=kernel, **solver_kwargs)
    orbitals = mean_field_orbitals(state, count=2)
    trial = ManyBodyTrialState.slater(grid, orbitals["orbitals"])
    energy = pekar_energy_nbody(trial, eps, kernel)
    twice_single = 2.0 * state.energy
    logger.info(
        "binding witness: trial %.8f vs 2 E(1) = %.8f", energy["total"], twice_single
    )
    return {
        "trial": energy,
        "orbital_energies": orbitals["eigenvalues"].tolist(),
        "twice_single_energy": twice_single,
        "margin": energy["total"] - twice_single,
        "witnesses_binding": bool(energy["total"] < twice_single),
        "density_integral": grid_integral(trial.density(), grid),
    }
