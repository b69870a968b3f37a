"""
Lattice geometry and plane-wave discretization.

This module handles:
1. Bravais lattices, reciprocal vectors and supercells
2. Plane-wave bases (Miller-index sets) and their FFT grids
3. Gamma-centered Monkhorst-Pack meshes of the Brillouin zone
4. Periodic fields stored as plane-wave coefficients

Fields use the expansion f(x) = sum_G c_G exp(iG.x) without normalization,
so the cell average of f is c_0 and the integral over the box is
volume * c_0.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np

from utils.errors import ConfigError, DomainMismatch, EmptyBasis

logger = logging.getLogger(__name__)

TWO_PI = 2.0 * np.pi


def _readonly(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class Lattice:
    """Bravais lattice; the columns of ``basis`` are the lattice vectors."""

    basis: np.ndarray

    def __post_init__(self) -> None:
        basis = np.array(self.basis, dtype=float)
        if basis.shape != (3, 3):
            raise ConfigError(f"lattice basis must be 3x3, got {basis.shape}")
        if np.linalg.det(basis) <= 0.0:
            raise ConfigError("lattice basis must have positive determinant")
        object.__setattr__(self, "basis", _readonly(basis))

    @classmethod
    def cubic(cls, a: float) -> "Lattice":
        return cls(a * np.eye(3))

    @classmethod
    def tetragonal(cls, a: float, c: float) -> "Lattice":
        return cls(np.diag([a, a, c]))

    @cached_property
    def reciprocal(self) -> np.ndarray:
        # b_i . a_j = 2 pi delta_ij, columns b_i
        return _readonly(TWO_PI * np.linalg.inv(self.basis).T)

    @property
    def cell_volume(self) -> float:
        return float(np.linalg.det(self.basis))

    def scaled(self, factor: float) -> "Lattice":
        return Lattice(self.basis * factor)

    def supercell(self, reps: Sequence[int]) -> "Lattice":
        reps_arr = np.asarray(reps, dtype=int)
        if reps_arr.shape != (3,) or np.any(reps_arr < 1):
            raise ConfigError(f"supercell repetitions must be 3 positive integers: {reps}")
        return Lattice(self.basis * reps_arr[None, :])

    def is_close(self, other: "Lattice", tol: float = 1e-10) -> bool:
        scale = max(1.0, float(np.abs(self.basis).max()))
        return bool(np.allclose(self.basis, other.basis, rtol=0.0, atol=tol * scale))

    def to_dict(self) -> Dict[str, Any]:
        return {"basis": self.basis.tolist()}


@dataclass(frozen=True, eq=False)
class PlaneWaveBasis:
    """
    A deterministic set of Miller indices and the FFT grid that carries them.

    ``gvectors`` holds integer triples sorted lexicographically; the set is
    closed under negation.
    """

    lattice: Lattice
    ecut: float
    gvectors: np.ndarray
    grid_dims: Tuple[int, int, int]

    def __post_init__(self) -> None:
        gvectors = np.array(self.gvectors, dtype=np.int64).reshape(-1, 3)
        if gvectors.shape[0] == 0:
            raise EmptyBasis("plane-wave basis has no G vectors")
        dims = tuple(int(d) for d in self.grid_dims)
        needed = 2 * np.abs(gvectors).max(axis=0) + 1
        if any(d < n for d, n in zip(dims, needed)):
            raise ConfigError(f"grid {dims} cannot carry Miller indices up to {needed // 2}")
        object.__setattr__(self, "gvectors", _readonly(gvectors))
        object.__setattr__(self, "grid_dims", dims)

    @classmethod
    def from_cutoff(
        cls,
        lattice: Lattice,
        ecut: float,
        grid_dims: Optional[Sequence[int]] = None,
    ) -> "PlaneWaveBasis":
        """
        Collect all G with 1/2 |G|^2 <= ecut.

        Args:
            lattice: Periodic cell
            ecut: Kinetic-energy cutoff in Hartree
            grid_dims: Optional FFT grid; default is 2 * max index + 1

        Returns:
            The basis with lexicographically ordered Miller indices
        """
        if ecut < 0:
            raise ConfigError(f"ecut must be >= 0, got {ecut}")
        gmax = np.sqrt(2.0 * ecut)
        lengths = np.linalg.norm(lattice.basis, axis=0)
        bounds = np.floor(gmax * lengths / TWO_PI + 1e-9).astype(int) + 1

        ranges = [np.arange(-b, b + 1) for b in bounds]
        miller = np.stack(np.meshgrid(*ranges, indexing="ij"), axis=-1).reshape(-1, 3)
        gcart = miller @ lattice.reciprocal.T
        kinetic = 0.5 * np.einsum("ij,ij->i", gcart, gcart)
        miller = miller[kinetic <= ecut * (1.0 + 1e-12) + 1e-14]
        order = np.lexsort((miller[:, 2], miller[:, 1], miller[:, 0]))
        miller = miller[order]

        if grid_dims is None:
            grid_dims = tuple(2 * np.abs(miller).max(axis=0) + 1)
        return cls(lattice, float(ecut), miller, tuple(grid_dims))

    @classmethod
    def full_grid(cls, lattice: Lattice, grid_dims: Sequence[int]) -> "PlaneWaveBasis":
        """Every frequency of an odd FFT grid; fields on it are grid functions."""
        dims = tuple(int(d) for d in grid_dims)
        if any(d % 2 == 0 for d in dims):
            raise ConfigError(f"full-grid bases need odd grid dimensions, got {dims}")
        ranges = [np.arange(-(d // 2), d // 2 + 1) for d in dims]
        miller = np.stack(np.meshgrid(*ranges, indexing="ij"), axis=-1).reshape(-1, 3)
        gcart = miller @ lattice.reciprocal.T
        ecut = 0.5 * float(np.einsum("ij,ij->i", gcart, gcart).max())
        return cls(lattice, ecut, miller, dims)

    @property
    def size(self) -> int:
        return int(self.gvectors.shape[0])

    @property
    def volume(self) -> float:
        return self.lattice.cell_volume

    @property
    def n_grid(self) -> int:
        return int(np.prod(self.grid_dims))

    @cached_property
    def max_index(self) -> np.ndarray:
        return _readonly(np.abs(self.gvectors).max(axis=0))

    @cached_property
    def gcart(self) -> np.ndarray:
        return _readonly(self.gvectors @ self.lattice.reciprocal.T)

    @cached_property
    def g2(self) -> np.ndarray:
        return _readonly(np.einsum("ij,ij->i", self.gcart, self.gcart))

    @cached_property
    def zero_index(self) -> int:
        return int(self.index_of(np.zeros(3, dtype=int)))

    @cached_property
    def _lookup(self) -> np.ndarray:
        # miller_to_g style table over the bounding box of the index set
        shape = tuple(2 * self.max_index + 1)
        table = np.full(shape, -1, dtype=np.int64)
        shifted = self.gvectors + self.max_index
        table[shifted[:, 0], shifted[:, 1], shifted[:, 2]] = np.arange(self.size)
        return _readonly(table)

    def index_of(self, miller: np.ndarray) -> np.ndarray:
        """Positions of Miller indices in the basis, -1 where absent."""
        miller = np.asarray(miller, dtype=np.int64)
        shifted = miller + self.max_index
        inside = np.all((shifted >= 0) & (shifted <= 2 * self.max_index), axis=-1)
        clipped = np.where(inside[..., None], shifted, 0)
        found = self._lookup[clipped[..., 0], clipped[..., 1], clipped[..., 2]]
        return np.where(inside, found, -1)

    @cached_property
    def grid_index(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        wrapped = np.mod(self.gvectors, np.asarray(self.grid_dims))
        return (wrapped[:, 0], wrapped[:, 1], wrapped[:, 2])

    def to_grid(self, coeffs: np.ndarray) -> np.ndarray:
        """Complex real-space values of sum_G c_G exp(iG.x) on the grid."""
        box = np.zeros(self.grid_dims, dtype=complex)
        box[self.grid_index] = coeffs
        return np.fft.ifftn(box) * self.n_grid

    def from_grid(self, values: np.ndarray) -> np.ndarray:
        """Plane-wave coefficients of grid values, restricted to the basis."""
        values = np.asarray(values)
        if values.shape != self.grid_dims:
            raise DomainMismatch(f"grid values {values.shape} do not match {self.grid_dims}")
        return np.fft.fftn(values)[self.grid_index] / self.n_grid

    def grid_points(self) -> np.ndarray:
        """Cartesian coordinates of the grid, shape (*grid_dims, 3)."""
        axes = [np.arange(d) / d for d in self.grid_dims]
        frac = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        return frac @ self.lattice.basis.T

    def grid_frequencies(self) -> np.ndarray:
        """Cartesian wave vector of every FFT bin, shape (3, *grid_dims)."""
        ints = [np.fft.fftfreq(d, 1.0 / d) for d in self.grid_dims]
        mesh = np.stack(np.meshgrid(*ints, indexing="ij"), axis=0)
        return np.einsum("ij,j...->i...", self.lattice.reciprocal, mesh)

    def same_as(self, other: "PlaneWaveBasis") -> bool:
        if self is other:
            return True
        return (
            self.grid_dims == other.grid_dims
            and self.size == other.size
            and self.lattice.is_close(other.lattice)
            and bool(np.array_equal(self.gvectors, other.gvectors))
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "lattice": self.lattice.to_dict(),
            "ecut": self.ecut,
            "grid_dims": list(self.grid_dims),
            "n_gvectors": self.size,
        }


@dataclass(frozen=True, eq=False)
class BZMesh:
    """Gamma-centered Monkhorst-Pack mesh with uniform weights."""

    lattice: Lattice
    shape: Tuple[int, int, int]
    labels: np.ndarray

    @classmethod
    def monkhorst_pack(cls, lattice: Lattice, shape: Sequence[int]) -> "BZMesh":
        dims = tuple(int(n) for n in shape)
        if len(dims) != 3 or any(n < 1 for n in dims):
            raise ConfigError(f"k-mesh must be 3 positive integers, got {shape}")
        ranges = [np.arange(n) for n in dims]
        labels = np.stack(np.meshgrid(*ranges, indexing="ij"), axis=-1).reshape(-1, 3)
        half = np.asarray(dims) // 2
        labels = np.where(labels > half, labels - np.asarray(dims), labels)
        return cls(lattice, dims, _readonly(labels.astype(np.int64)))

    @classmethod
    def gamma_only(cls, lattice: Lattice) -> "BZMesh":
        return cls.monkhorst_pack(lattice, (1, 1, 1))

    @property
    def n_points(self) -> int:
        return int(self.labels.shape[0])

    @cached_property
    def fractional(self) -> np.ndarray:
        return _readonly(self.labels / np.asarray(self.shape, dtype=float))

    @cached_property
    def points(self) -> np.ndarray:
        return _readonly(self.fractional @ self.lattice.reciprocal.T)

    @cached_property
    def weights(self) -> np.ndarray:
        return _readonly(np.full(self.n_points, 1.0 / self.n_points))

    @cached_property
    def _flat_of_label(self) -> np.ndarray:
        table = np.empty(self.shape, dtype=np.int64)
        wrapped = np.mod(self.labels, np.asarray(self.shape))
        table[wrapped[:, 0], wrapped[:, 1], wrapped[:, 2]] = np.arange(self.n_points)
        return _readonly(table)

    def index_of_label(self, label: np.ndarray) -> np.ndarray:
        """Mesh position of integer labels, taken modulo the mesh shape."""
        wrapped = np.mod(np.asarray(label, dtype=np.int64), np.asarray(self.shape))
        return self._flat_of_label[wrapped[..., 0], wrapped[..., 1], wrapped[..., 2]]

    def negated_index(self) -> np.ndarray:
        """Position of -q for every q."""
        return self.index_of_label(-self.labels)


class FieldKind(str, Enum):
    DENSITY = "density"
    POTENTIAL = "potential"
    WAVEFUNCTION_WEIGHT = "wavefunction-weight"


@dataclass(frozen=True, eq=False)
class PeriodicField:
    """A real periodic field given by its plane-wave coefficients."""

    basis: PlaneWaveBasis
    coeffs: np.ndarray
    kind: FieldKind = FieldKind.DENSITY

    def __post_init__(self) -> None:
        coeffs = np.array(self.coeffs, dtype=complex).reshape(-1)
        if coeffs.shape[0] != self.basis.size:
            raise DomainMismatch(
                f"{coeffs.shape[0]} coefficients for a basis of size {self.basis.size}"
            )
        object.__setattr__(self, "coeffs", _readonly(coeffs))
        object.__setattr__(self, "kind", FieldKind(self.kind))

    @classmethod
    def zeros(cls, basis: PlaneWaveBasis, kind: FieldKind = FieldKind.DENSITY) -> "PeriodicField":
        return cls(basis, np.zeros(basis.size, dtype=complex), kind)

    @classmethod
    def from_values(
        cls, basis: PlaneWaveBasis, values: np.ndarray, kind: FieldKind = FieldKind.DENSITY
    ) -> "PeriodicField":
        return cls(basis, basis.from_grid(values), kind)

    def values(self) -> np.ndarray:
        return np.real(self.basis.to_grid(self.coeffs))

    def mean(self) -> float:
        return float(np.real(self.coeffs[self.basis.zero_index]))

    def integral(self) -> float:
        return self.mean() * self.basis.volume

    def inner(self, other: "PeriodicField") -> float:
        """The L2 pairing of two real fields over the box."""
        self._check_same(other)
        return float(np.real(np.vdot(self.coeffs, other.coeffs)) * self.basis.volume)

    def l2_norm(self) -> float:
        return float(np.sqrt(max(self.inner(self), 0.0)))

    def hermiticity_error(self) -> float:
        partner = self.basis.index_of(-self.basis.gvectors)
        return float(np.abs(self.coeffs[partner] - np.conj(self.coeffs)).max())

    def with_kind(self, kind: FieldKind) -> "PeriodicField":
        return PeriodicField(self.basis, self.coeffs, kind)

    def transfer(self, target: PlaneWaveBasis) -> Tuple["PeriodicField", float]:
        """
        Copy coefficients index-by-index onto another basis of the same box.

        Returns:
            The transferred field and the fraction of L2 mass that was dropped
        """
        if not self.basis.lattice.is_close(target.lattice):
            raise DomainMismatch("transfer needs bases on the same lattice")
        return copy_by_index(self.coeffs, self.basis, target, self.kind)

    def translated(self, shift: np.ndarray) -> "PeriodicField":
        """The field f(x - shift)."""
        phase = np.exp(-1j * (self.basis.gcart @ np.asarray(shift, dtype=float)))
        return PeriodicField(self.basis, self.coeffs * phase, self.kind)

    def _check_same(self, other: "PeriodicField") -> None:
        if not self.basis.same_as(other.basis):
            raise DomainMismatch("fields live on different plane-wave bases")

    def __add__(self, other: "PeriodicField") -> "PeriodicField":
        self._check_same(other)
        return PeriodicField(self.basis, self.coeffs + other.coeffs, self.kind)

    def __sub__(self, other: "PeriodicField") -> "PeriodicField":
        self._check_same(other)
        return PeriodicField(self.basis, self.coeffs - other.coeffs, self.kind)

    def __mul__(self, scalar: float) -> "PeriodicField":
        return PeriodicField(self.basis, self.coeffs * scalar, self.kind)

    __rmul__ = __mul__

    def __neg__(self) -> "PeriodicField":
        return PeriodicField(self.basis, -self.coeffs, self.kind)


def copy_by_index(
    coeffs: np.ndarray, source: PlaneWaveBasis, target: PlaneWaveBasis, kind: FieldKind
) -> Tuple[PeriodicField, float]:
    positions = target.index_of(source.gvectors)
    kept = positions >= 0
    out = np.zeros(target.size, dtype=complex)
    out[positions[kept]] = coeffs[kept]
    total = float(np.sum(np.abs(coeffs) ** 2))
    dropped = float(np.sum(np.abs(coeffs[~kept]) ** 2))
    fraction = dropped / total if total > 0 else 0.0
    return PeriodicField(target, out, kind), fraction


def periodized_gaussians(
    basis: PlaneWaveBasis,
    positions: Sequence[Sequence[float]],
    charges: Sequence[float],
    widths: Sequence[float],
    kind: FieldKind = FieldKind.DENSITY,
) -> PeriodicField:
    """
    Lattice-periodic sum of normalized Gaussians.

    Args:
        basis: Target plane-wave basis
        positions: Cartesian centers, one per site
        charges: Total charge carried by each site
        widths: Standard deviation of each Gaussian

    Returns:
        Field with coefficients (1/|cell|) sum_s q_s exp(-s^2 |G|^2 / 2) exp(-iG.tau_s)
    """
    coeffs = np.zeros(basis.size, dtype=complex)
    for tau, q, sigma in zip(positions, charges, widths):
        if sigma <= 0:
            raise ConfigError(f"Gaussian width must be positive, got {sigma}")
        phase = np.exp(-1j * (basis.gcart @ np.asarray(tau, dtype=float)))
        coeffs += q * np.exp(-0.5 * sigma**2 * basis.g2) * phase
    return PeriodicField(basis, coeffs / basis.volume, kind)


def single_mode(
    basis: PlaneWaveBasis,
    miller: Sequence[int],
    amplitude: float,
    kind: FieldKind = FieldKind.POTENTIAL,
) -> PeriodicField:
    """The field amplitude * cos(G.x) for one reciprocal vector G."""
    coeffs = np.zeros(basis.size, dtype=complex)
    plus = int(basis.index_of(np.asarray(miller)))
    minus = int(basis.index_of(-np.asarray(miller)))
    if plus < 0 or minus < 0:
        raise DomainMismatch(f"G = {tuple(miller)} is not in the basis")
    if plus == minus:
        coeffs[plus] = amplitude
    else:
        coeffs[plus] += 0.5 * amplitude
        coeffs[minus] += 0.5 * amplitude
    return PeriodicField(basis, coeffs, kind)


def spectral_gradient(values: np.ndarray, grid: PlaneWaveBasis) -> np.ndarray:
    """Fourier derivative of grid values, shape (3, *grid_dims)."""
    transformed = np.fft.fftn(values)
    k = grid.grid_frequencies()
    gradient = np.fft.ifftn(1j * k * transformed[None, ...], axes=(1, 2, 3))
    if np.isrealobj(values):
        return np.real(gradient)
    return gradient


def grid_kinetic(values: np.ndarray, grid: PlaneWaveBasis) -> float:
    """1/2 integral |grad psi|^2 over the box, evaluated spectrally."""
    transformed = np.fft.fftn(values) / grid.n_grid
    k = grid.grid_frequencies()
    k2 = np.sum(k * k, axis=0)
    return 0.5 * grid.volume * float(np.sum(k2 * np.abs(transformed) ** 2))


def grid_integral(values: np.ndarray, grid: PlaneWaveBasis) -> float:
    return float(np.real(np.sum(values))) * grid.volume / grid.n_grid
