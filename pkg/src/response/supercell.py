"""
Bloch spectra of the crystal seen from a periodic supercell.

This module handles:
1. The supercell lattice, its density basis and the matching k-mesh
2. Pair coefficients of conj(u_a) u_b for occupied/unoccupied pairs
3. The independent-particle response matrix, one block per momentum class
4. Index tables that place Bloch-basis operators on supercell plane waves

A supercell of n1 x n2 x n3 cells sees exactly the Bloch states on the
Gamma-centered n1 x n2 x n3 mesh. A state with mesh label j and periodic
coefficient G carries the supercell Miller index J = n * G + j. A pair
(a, b) only couples to supercell modes J with J = j_b - j_a (mod n), so
the response matrix is block diagonal over these classes.
"""

import logging
import math
import threading
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from crystal.crystal_scf import BlochEigensystem, CrystalGroundState, diagonalize_bloch
from lattice_core.lattice import BZMesh, Lattice, PlaneWaveBasis
from utils.errors import ConfigError, NoGap

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class PairBlock:
    """Pair coefficients of one momentum class."""

    kappa: int
    j_index: np.ndarray
    coefficients: np.ndarray
    energy_differences: np.ndarray
    occupied_first: np.ndarray
    occupied_state: np.ndarray
    empty_state: np.ndarray
    last_band: np.ndarray


@dataclass(frozen=True, eq=False)
class SupercellSpectrum:
    """
    Crystal bands on the supercell mesh and their pair densities.

    States are numbered flat as iq * n_bands + band. ``basis`` is the
    supercell density basis; it contains every difference of two Bloch
    plane waves, so pair densities and projector densities are exact.
    """

    crystal: CrystalGroundState
    reps: Tuple[int, int, int]
    bloch: BlochEigensystem
    basis: PlaneWaveBasis
    _cache: Dict[int, Tuple[np.ndarray, np.ndarray, np.ndarray]] = field(
        default_factory=dict, repr=False
    )
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @property
    def lattice(self) -> Lattice:
        return self.basis.lattice

    @property
    def mesh(self) -> BZMesh:
        return self.bloch.mesh

    @property
    def volume(self) -> float:
        return self.basis.volume

    @property
    def n_occupied(self) -> int:
        return self.crystal.z

    @property
    def n_bands(self) -> int:
        return self.bloch.n_bands

    @property
    def n_states(self) -> int:
        return self.mesh.n_points * self.n_bands

    @property
    def fermi_level(self) -> float:
        return self.crystal.fermi_level

    @property
    def all_bands(self) -> bool:
        return self.n_bands == self.crystal.basis.size

    @property
    def energies(self) -> np.ndarray:
        return self.bloch.eigenvalues.reshape(-1)

    @property
    def occupied_mask(self) -> np.ndarray:
        mask = np.zeros((self.mesh.n_points, self.n_bands), dtype=bool)
        mask[:, : self.n_occupied] = True
        return mask.reshape(-1)

    def class_of(self, miller: np.ndarray) -> np.ndarray:
        """Flat mesh position of J mod n for supercell Miller indices."""
        return self.mesh.index_of_label(np.asarray(miller, dtype=np.int64))

    def class_members(self, kappa: int) -> np.ndarray:
        return np.flatnonzero(self._basis_classes == kappa)

    @property
    def _basis_classes(self) -> np.ndarray:
        classes = self.__dict__.get("_classes")
        if classes is None:
            classes = self.class_of(self.basis.gvectors)
            self.__dict__["_classes"] = classes
        return classes

    def cell_functions(self) -> np.ndarray:
        """Periodic parts of all computed states on the crystal density grid."""
        functions = self.__dict__.get("_cell_functions")
        if functions is None:
            grid = self.crystal.density_basis
            bands = np.arange(self.n_bands)
            functions = np.stack(
                [self.bloch.cell_functions(grid, iq, bands) for iq in range(self.mesh.n_points)]
            )
            self.__dict__["_cell_functions"] = functions
        return functions

    def pair_block(self, kappa: int) -> PairBlock:
        """
        Pair coefficients c_ab(J) for every ordered occupied/unoccupied pair in a class.

        c_ab(J) is the Fourier coefficient of conj(u_a) u_b at the cell
        vector (J - j_b + j_a) / n; vectors outside the crystal density
        grid carry no weight.
        """
        members = self.class_members(kappa)
        n_occ = self.n_occupied
        n_q = self.mesh.n_points
        if n_occ == 0 or members.size == 0 or self.n_bands <= n_occ:
            empty = np.zeros(0, dtype=int)
            return PairBlock(kappa, members, np.zeros((members.size, 0), dtype=complex),
                             np.zeros(0), np.zeros(0, dtype=bool), empty, empty, np.zeros(0, dtype=bool))

        grid = self.crystal.density_basis
        dims = np.asarray(grid.grid_dims)
        half = dims // 2
        functions = self.cell_functions()
        eigenvalues = self.bloch.eigenvalues
        labels = self.mesh.labels
        reps = np.asarray(self.reps)
        supercell_miller = self.basis.gvectors[members]
        occupied = np.arange(n_occ)
        unoccupied = np.arange(n_occ, self.n_bands)

        columns: List[np.ndarray] = []
        deltas: List[np.ndarray] = []
        occ_first: List[np.ndarray] = []
        occ_state: List[np.ndarray] = []
        emp_state: List[np.ndarray] = []
        last: List[np.ndarray] = []
        for ia in range(n_q):
            ib = int(self.mesh.index_of_label(labels[ia] + labels[kappa]))
            shift = labels[ib] - labels[ia]
            cell_vectors = (supercell_miller - shift[None, :]) // reps[None, :]
            inside = np.all(np.abs(cell_vectors) <= half[None, :], axis=1)
            wrapped = np.mod(cell_vectors, dims[None, :])

            for first, bands_a, bands_b in ((True, occupied, unoccupied), (False, unoccupied, occupied)):
                products = np.conj(functions[ia][bands_a])[:, None] * functions[ib][bands_b][None, :]
                products = products.reshape((-1,) + tuple(dims))
                coeffs = np.fft.fftn(products, axes=(1, 2, 3)) / grid.n_grid
                gathered = coeffs[:, wrapped[:, 0], wrapped[:, 1], wrapped[:, 2]] * inside[None, :]
                columns.append(gathered.T)

                band_a = np.repeat(bands_a, bands_b.size)
                band_b = np.tile(bands_b, bands_a.size)
                if first:
                    occ = ia * self.n_bands + band_a
                    emp = ib * self.n_bands + band_b
                    last_flag = band_b == self.n_bands - 1
                else:
                    occ = ib * self.n_bands + band_b
                    emp = ia * self.n_bands + band_a
                    last_flag = band_a == self.n_bands - 1
                deltas.append(self.energies[occ] - self.energies[emp])
                occ_first.append(np.full(occ.size, first))
                occ_state.append(occ)
                emp_state.append(emp)
                last.append(last_flag)

        return PairBlock(
            kappa=kappa,
            j_index=members,
            coefficients=np.concatenate(columns, axis=1),
            energy_differences=np.concatenate(deltas),
            occupied_first=np.concatenate(occ_first),
            occupied_state=np.concatenate(occ_state),
            empty_state=np.concatenate(emp_state),
            last_band=np.concatenate(last),
        )

    def chi0_block(self, kappa: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """
        Independent-particle response of one class.

        Returns:
            (J positions, chi0, chi0 restricted to the last computed band);
            chi0 = |supercell|^-1 sum_pairs c c^H / (lambda_occ - lambda_empty)
        """
        with self._lock:
            cached = self._cache.get(kappa)
        if cached is not None:
            return cached
        block = self.pair_block(kappa)
        scaled = block.coefficients / block.energy_differences[None, :]
        chi = scaled @ block.coefficients.conj().T / self.volume
        tail = block.last_band
        chi_last = (scaled[:, tail] @ block.coefficients[:, tail].conj().T) / self.volume
        result = (block.j_index, chi, chi_last)
        with self._lock:
            self._cache[kappa] = result
        return result

    def bloch_plane_wave_index(self) -> np.ndarray:
        """
        Supercell positions of J = j_a - j_b + n (G - G').

        Shape (n_q, n_q, n_pw, n_pw); these are the modes that couple the
        plane wave G + q_a to G' + q_b.
        """
        table = self.__dict__.get("_pw_index")
        if table is None:
            labels = self.mesh.labels
            gvectors = self.crystal.basis.gvectors
            reps = np.asarray(self.reps)
            dq = labels[:, None, None, None, :] - labels[None, :, None, None, :]
            dg = gvectors[None, None, :, None, :] - gvectors[None, None, None, :, :]
            table = self.basis.index_of(dq + reps * dg)
            if np.any(table < 0):
                raise ConfigError("supercell density basis misses a plane-wave difference")
            self.__dict__["_pw_index"] = table
        return table


def supercell_density_basis(crystal: CrystalGroundState, reps: Sequence[int]) -> PlaneWaveBasis:
    """Sphere holding every difference K_a - K_b of two Bloch plane waves."""
    lattice = crystal.lattice.supercell(reps)
    mesh = BZMesh.monkhorst_pack(crystal.lattice, reps)
    points = mesh.points
    spread = np.linalg.norm(points[:, None, :] - points[None, :, :], axis=-1).max()
    radius = 2.0 * math.sqrt(2.0 * crystal.basis.ecut) + float(spread)
    return PlaneWaveBasis.from_cutoff(lattice, 0.5 * radius**2)


def build_supercell(
    crystal: CrystalGroundState,
    reps: Sequence[int],
    n_empty: Optional[int] = None,
    threads: Optional[int] = None,
) -> SupercellSpectrum:
    """
    Diagonalize the crystal on the mesh matching a supercell.

    Args:
        crystal: Converged host
        reps: Cells per supercell side
        n_empty: Unoccupied bands per k-point (None keeps every band of the basis)

    Raises:
        NoGap: If a band crosses the crystal Fermi level on this mesh
    """
    reps_t = tuple(int(r) for r in reps)
    if len(reps_t) != 3 or any(r < 1 for r in reps_t):
        raise ConfigError(f"supercell repetitions must be 3 positive integers: {reps}")
    n_bands = crystal.basis.size if n_empty is None else crystal.z + int(n_empty)
    if n_bands > crystal.basis.size:
        raise ConfigError(f"{n_bands} bands requested but the basis has {crystal.basis.size}")
    mesh = BZMesh.monkhorst_pack(crystal.lattice, reps_t)
    bloch = diagonalize_bloch(crystal.v0, crystal.basis, mesh, n_bands, threads)
    z = crystal.z
    if z > 0:
        valence = float(bloch.eigenvalues[:, z - 1].max())
        if valence >= crystal.fermi_level:
            raise NoGap(f"valence maximum {valence:.6f} reaches the Fermi level on the supercell mesh")
        if n_bands > z:
            conduction = float(bloch.eigenvalues[:, z].min())
            if conduction <= crystal.fermi_level:
                raise NoGap(
                    f"conduction minimum {conduction:.6f} reaches the Fermi level on the supercell mesh"
                )
    basis = supercell_density_basis(crystal, reps_t)
    logger.info(
        "supercell %s: %d k-points, %d bands, %d density modes",
        reps_t, mesh.n_points, n_bands, basis.size,
    )
    return SupercellSpectrum(crystal, reps_t, bloch, basis)
