"""
Macroscopic dielectric matrix and Pekar's effective interaction.

This module handles:
1. Extraction of the 3x3 dielectric matrix from small-k screening
2. The potential W solving -div(eps grad W) = 4 pi rho
3. The Pekar interaction F^P in Fourier form and in real-space form
4. Periodic (jellium) and truncated (isolated) Coulomb kernels
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Sequence

import numpy as np

from lattice_core.coulomb import FOUR_PI, coulomb_D
from lattice_core.lattice import FieldKind, PeriodicField, PlaneWaveBasis, single_mode
from response.linear_response import ResponseContext, solve_dielectric
from utils.errors import ConfigError, FitFailure, SingularEps
from utils.fitting import extrapolate_to_zero

logger = logging.getLogger(__name__)

KERNELS = ("periodic", "isolated")

FIT_DIRECTIONS = (
    (1, 0, 0), (0, 1, 0), (0, 0, 1),
    (1, 1, 0), (1, 0, 1), (0, 1, 1),
    (1, -1, 0), (1, 0, -1), (0, 1, -1),
)


@dataclass(frozen=True, eq=False)
class DielectricMatrix:
    """Symmetric 3x3 dielectric matrix with the report of how it was obtained."""

    eps: np.ndarray
    k_extrapolation_report: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        eps = np.array(self.eps, dtype=float)
        if eps.shape != (3, 3):
            raise ConfigError(f"dielectric matrix must be 3x3, got {eps.shape}")
        if np.abs(eps - eps.T).max() > 1e-10:
            raise ConfigError("dielectric matrix must be symmetric")
        eps = 0.5 * (eps + eps.T)
        eps.setflags(write=False)
        object.__setattr__(self, "eps", eps)

    @classmethod
    def identity(cls) -> "DielectricMatrix":
        return cls(np.eye(3), {"source": "identity"})

    @classmethod
    def isotropic(cls, value: float) -> "DielectricMatrix":
        return cls(value * np.eye(3), {"source": "scalar"})

    @property
    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.eps)

    def is_identity(self, tol: float = 1e-12) -> bool:
        return bool(np.abs(self.eps - np.eye(3)).max() <= tol)

    def quadratic(self, k: np.ndarray) -> np.ndarray:
        """k^T eps k for wave vectors stacked on the first axis."""
        return np.einsum("i...,ij,j...->...", k, self.eps, k)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "eps": self.eps.tolist(),
            "eigenvalues": self.eigenvalues.tolist(),
            "report": self.k_extrapolation_report,
        }


def parse_eps(spec: Any) -> DielectricMatrix:
    """
    Read a dielectric matrix from a config value.

    Accepts "identity", a number, a list of three diagonal entries or a
    3x3 nested list.
    """
    if isinstance(spec, DielectricMatrix):
        return spec
    if isinstance(spec, str):
        if spec.strip().lower() == "identity":
            return DielectricMatrix.identity()
        try:
            return DielectricMatrix.isotropic(float(spec))
        except ValueError as exc:
            raise ConfigError(f"cannot read dielectric matrix {spec!r}") from exc
    if isinstance(spec, (int, float)):
        return DielectricMatrix.isotropic(float(spec))
    array = np.asarray(spec, dtype=float)
    if array.shape == (3,):
        return DielectricMatrix(np.diag(array), {"source": "diagonal"})
    return DielectricMatrix(array, {"source": "matrix"})


def _box_length(basis: PlaneWaveBasis) -> float:
    return float(np.linalg.norm(basis.lattice.basis, axis=0).min())


def coulomb_kernel(basis: PlaneWaveBasis, kernel: str = "periodic") -> np.ndarray:
    """4 pi / |k|^2 (jellium) or its truncation at half the box length."""
    return dielectric_kernel(basis, DielectricMatrix.identity(), kernel)


def dielectric_kernel(
    basis: PlaneWaveBasis, eps: DielectricMatrix, kernel: str = "periodic"
) -> np.ndarray:
    """
    Fourier multiplier of the Green function of -div(eps grad).

    The isolated kernel cuts the Green function where |eps^{-1/2} x| exceeds
    L / (2 sqrt(lambda_max(eps))), so its support fits in half the box.

    Raises:
        SingularEps: If k^T eps k vanishes at some k != 0
    """
    if kernel not in KERNELS:
        raise ConfigError(f"unknown Coulomb kernel {kernel!r}; choose from {KERNELS}")
    kek = eps.quadratic(basis.gcart.T)
    nonzero = basis.g2 > 1e-14
    if np.any(kek[nonzero] <= 1e-14 * basis.g2[nonzero]):
        raise SingularEps("k^T eps k vanishes on the grid")
    out = np.zeros(basis.size)
    if kernel == "periodic":
        out[nonzero] = FOUR_PI / kek[nonzero]
        return out
    radius = _box_length(basis) / (2.0 * np.sqrt(eps.eigenvalues.max()))
    out[~nonzero] = 2.0 * np.pi * radius**2
    out[nonzero] = FOUR_PI * (1.0 - np.cos(radius * np.sqrt(kek[nonzero]))) / kek[nonzero]
    return out


def w_poisson(rho: PeriodicField, eps: DielectricMatrix, kernel: str = "periodic") -> PeriodicField:
    """The dielectric potential W with W(k) = 4 pi rho(k) / (k^T eps k)."""
    return PeriodicField(
        rho.basis, dielectric_kernel(rho.basis, eps, kernel) * rho.coeffs, FieldKind.POTENTIAL
    )


def pekar_interaction(rho: PeriodicField, eps: DielectricMatrix, kernel: str = "periodic") -> float:
    """
    F^P[rho] = 2 pi |box| sum_k |rho(k)|^2 (1 / k^T eps k - 1 / |k|^2).

    For the isolated kernel both Green functions are the truncated ones.
    """
    difference = dielectric_kernel(rho.basis, eps, kernel) - coulomb_kernel(rho.basis, kernel)
    value = 0.5 * rho.basis.volume * np.sum(difference * np.abs(rho.coeffs) ** 2)
    return float(value)


def pekar_interaction_real_space(
    rho: PeriodicField, eps: DielectricMatrix, kernel: str = "periodic"
) -> float:
    """The same interaction as 1/2 int rho (W_rho - rho * |x|^-1) on the grid."""
    screened = w_poisson(rho, eps, kernel)
    bare = PeriodicField(rho.basis, coulomb_kernel(rho.basis, kernel) * rho.coeffs, FieldKind.POTENTIAL)
    density = rho.values()
    difference = screened.values() - bare.values()
    return 0.5 * float(np.sum(density * difference)) * rho.basis.volume / rho.basis.n_grid


def screening_ratio(ctx: ResponseContext, miller: Sequence[int]) -> float:
    """eta(k) = D(nu_k, (1 + L)^-1 nu_k) / D(nu_k, nu_k) for nu_k = cos(k.x)."""
    nu = single_mode(ctx.basis, miller, 1.0, FieldKind.DENSITY)
    screened, _ = solve_dielectric(ctx, nu)
    return coulomb_D(nu, screened) / coulomb_D(nu, nu)


def extract_eps_m(ctx: ResponseContext, tol: float = 1e-2, degree: int = 2) -> DielectricMatrix:
    """
    Fit the dielectric matrix from the screening of long-wavelength modes.

    For nine directions d, 1/eta is measured at the supercell vectors d, 2d,
    ..., (degree + 1)d and extrapolated to k = 0 with a polynomial in |k|^2
    of the given degree, which gives d^T eps d / |d|^2. The six entries of eps then follow from a linear
    least-squares fit.

    Raises:
        ConfigError: If the supercell has fewer than 4 cells on a side
        FitFailure: If the symmetric fit leaves a relative residual above
            ``tol`` or an eigenvalue below 1
    """
    if ctx.crystal.z == 0:
        return DielectricMatrix(np.eye(3), {"source": "vacuum", "rows": []})
    if min(ctx.supercell) < 4:
        raise ConfigError(f"dielectric fit needs >= 4 cells per side, got {ctx.supercell}")
    if degree < 1:
        raise ConfigError(f"extrapolation degree must be >= 1, got {degree}")

    reciprocal = ctx.basis.lattice.reciprocal
    rows: List[Dict[str, Any]] = []
    design, targets = [], []
    for direction in FIT_DIRECTIONS:
        d = np.asarray(direction)
        k2_values, inverse_eta = [], []
        for scale in range(1, degree + 2):
            k = reciprocal @ (scale * d)
            eta = screening_ratio(ctx, scale * d)
            k2_values.append(float(k @ k))
            inverse_eta.append(1.0 / eta)
        limit = extrapolate_to_zero(k2_values, inverse_eta, degree=degree)["value"]
        unit = reciprocal @ d
        unit = unit / np.linalg.norm(unit)
        design.append(
            [unit[0] ** 2, unit[1] ** 2, unit[2] ** 2,
             2 * unit[0] * unit[1], 2 * unit[0] * unit[2], 2 * unit[1] * unit[2]]
        )
        targets.append(limit)
        rows.append(
            {"direction": list(direction), "k2": k2_values, "inverse_eta": inverse_eta, "limit": limit}
        )

    design_arr = np.asarray(design)
    target_arr = np.asarray(targets)
    solution, *_ = np.linalg.lstsq(design_arr, target_arr, rcond=None)
    residual = float(np.linalg.norm(design_arr @ solution - target_arr) / np.linalg.norm(target_arr))
    xx, yy, zz, xy, xz, yz = solution
    eps = np.array([[xx, xy, xz], [xy, yy, yz], [xz, yz, zz]])
    report = {"source": "small-k fit", "degree": degree, "rows": rows, "residual": residual}
    if residual > tol:
        raise FitFailure(f"dielectric fit residual {residual:.3e} above {tol:.1e}")
    if np.linalg.eigvalsh(eps).min() < 1.0 - 1e-8:
        raise FitFailure(f"fitted dielectric matrix has eigenvalues {np.linalg.eigvalsh(eps)}")
    logger.info("dielectric matrix eigenvalues %s (fit residual %.2e)", np.linalg.eigvalsh(eps), residual)
    return DielectricMatrix(eps, report)
