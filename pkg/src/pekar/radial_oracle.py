"""
Radial reference solver for the isotropic Choquard equation.

For eps = e * Identity the Pekar functional is
1/2 int |grad psi|^2 - c/2 D(|psi|^2, |psi|^2) with c = 1 - 1/e, whose
ground state is radial. Writing psi = u(r) / (sqrt(4 pi) r) turns the
Euler-Lagrange equation into the one-dimensional problem

    -1/2 u'' - c V_H(r) u = lambda u,   u(0) = u(r_max) = 0

with V_H(r) = r^-1 int_0^r u^2 + int_r^inf u^2 / s. It is solved by
finite differences and damped iteration on the Hartree potential.
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict

import numpy as np
from scipy.integrate import cumulative_trapezoid, trapezoid
from scipy.linalg import eigh_tridiagonal

from utils.errors import ConfigError, NoConvergence

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class RadialSolution:
    r: np.ndarray
    u: np.ndarray
    coupling: float
    energy: float
    eigenvalue: float
    kinetic: float
    interaction: float
    iterations: int

    def to_dict(self) -> Dict[str, Any]:
        return {
            "coupling": self.coupling,
            "energy": self.energy,
            "eigenvalue": self.eigenvalue,
            "kinetic": self.kinetic,
            "interaction": self.interaction,
            "iterations": self.iterations,
            "r_max": float(self.r[-1]),
            "n_points": int(self.r.size),
        }


def hartree_potential(r: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Newtonian potential of the radial density u^2 / (4 pi r^2)."""
    density = u**2
    enclosed = cumulative_trapezoid(density, r, initial=0.0)
    outer = cumulative_trapezoid(density / r, r, initial=0.0)
    return enclosed / r + (outer[-1] - outer)


def solve_radial_choquard(
    coupling: float = 1.0,
    r_max: float = 40.0,
    n_points: int = 10000,
    mix: float = 0.5,
    tol: float = 1e-12,
    max_iter: int = 500,
) -> RadialSolution:
    """
    Ground state of the radial Choquard problem.

    Args:
        coupling: c in -c/2 D(rho, rho); 1 - 1/e for a scalar medium
        r_max: Outer radius with a Dirichlet condition
        n_points: Interior grid points

    Returns:
        RadialSolution; energy = lambda + c/2 int u^2 V_H

    Raises:
        ConfigError: If the coupling is not positive
        NoConvergence: If the Hartree iteration stalls
    """
    if coupling <= 0.0:
        raise ConfigError(f"radial oracle needs a positive coupling, got {coupling}")
    h = r_max / (n_points + 1)
    r = h * np.arange(1, n_points + 1)
    u = r * np.exp(-coupling * r / 2.0)
    u /= np.sqrt(trapezoid(u**2, r))
    potential = -coupling * hartree_potential(r, u)
    off_diagonal = np.full(n_points - 1, -0.5 / h**2)

    eigenvalue = 0.0
    change = np.inf
    for iteration in range(1, max_iter + 1):
        values, vectors = eigh_tridiagonal(
            1.0 / h**2 + potential, off_diagonal, select="i", select_range=(0, 0)
        )
        eigenvalue = float(values[0])
        u = vectors[:, 0] / np.sqrt(h)
        if u[np.argmax(np.abs(u))] < 0:
            u = -u
        target = -coupling * hartree_potential(r, u)
        change = float(np.abs(target - potential).max())
        potential = (1.0 - mix) * potential + mix * target
        logger.debug("radial oracle %d: lambda %.12f change %.3e", iteration, eigenvalue, change)
        if change < tol:
            break
    else:
        raise NoConvergence(f"radial Hartree iteration change {change:.2e} after {max_iter} steps")

    v_hartree = hartree_potential(r, u)
    coulomb = float(trapezoid(u**2 * v_hartree, r))
    interaction = -0.5 * coupling * coulomb
    energy = eigenvalue + 0.5 * coupling * coulomb
    logger.info("radial oracle: c = %.4f, E = %.10f (%d iterations)", coupling, energy, iteration)
    return RadialSolution(
        r=r,
        u=u,
        coupling=coupling,
        energy=energy,
        eigenvalue=eigenvalue,
        kinetic=energy - interaction,
        interaction=interaction,
        iterations=iteration,
    )


def isotropic_energy(eps_value: float, **kwargs: Any) -> float:
    """Reference Pekar energy for eps = eps_value * Identity."""
    if eps_value <= 1.0:
        return 0.0
    return solve_radial_choquard(coupling=1.0 - 1.0 / eps_value, **kwargs).energy
