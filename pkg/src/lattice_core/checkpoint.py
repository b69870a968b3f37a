"""
Binary checkpoints for fields, host crystals and defect states.

Layout: the 8-byte magic ``PLABCHK1``, the header length as a little-endian
uint64, a UTF-8 JSON header, then raw little-endian float64 data. Complex
arrays are stored as interleaved (real, imag) pairs; the header's
``arrays`` table records name, shape, dtype and byte offset of each one.
"""

import json
import logging
import struct
from pathlib import Path
from typing import TYPE_CHECKING, Any, Dict, Mapping, Optional, Tuple, Union

import numpy as np

from lattice_core.lattice import BZMesh, FieldKind, Lattice, PeriodicField, PlaneWaveBasis
from utils.errors import ConfigError

if TYPE_CHECKING:
    from crystal.crystal_scf import CrystalGroundState
    from response.defect_scf import DefectState

logger = logging.getLogger(__name__)

MAGIC = b"PLABCHK1"
VERSION = 1
DEFECT_Q_SIZE_GATE = 2048

PathLike = Union[str, Path]


def _encode(array: np.ndarray) -> Tuple[bytes, str]:
    array = np.asarray(array)
    if np.iscomplexobj(array):
        pairs = np.stack([array.real, array.imag], axis=-1)
        return np.ascontiguousarray(pairs, dtype="<f8").tobytes(), "complex128"
    if array.dtype == bool:
        return np.ascontiguousarray(array, dtype="<f8").tobytes(), "bool"
    if np.issubdtype(array.dtype, np.integer):
        return np.ascontiguousarray(array, dtype="<f8").tobytes(), "int64"
    return np.ascontiguousarray(array, dtype="<f8").tobytes(), "float64"


def _decode(raw: bytes, shape, dtype: str) -> np.ndarray:
    data = np.frombuffer(raw, dtype="<f8")
    if dtype == "complex128":
        pairs = data.reshape(tuple(shape) + (2,))
        return pairs[..., 0] + 1j * pairs[..., 1]
    values = data.reshape(tuple(shape))
    if dtype == "int64":
        return values.astype(np.int64)
    if dtype == "bool":
        return values.astype(bool)
    return values.copy()


def write_checkpoint(
    path: PathLike, kind: str, arrays: Mapping[str, np.ndarray], header: Optional[Dict[str, Any]] = None
) -> Path:
    """
    Write named arrays and a JSON header.

    Args:
        path: Target file; parent directories are created
        kind: Checkpoint kind recorded in the header
        arrays: Arrays to store, in order
        header: Extra JSON-serializable header entries

    Returns:
        The written path
    """
    table = []
    chunks = []
    offset = 0
    for name, array in arrays.items():
        raw, dtype = _encode(array)
        table.append({"name": name, "shape": list(np.shape(array)), "dtype": dtype, "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    full_header = {"version": VERSION, "kind": kind, **(header or {}), "arrays": table}
    encoded = json.dumps(full_header, sort_keys=True).encode("utf-8")

    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    with open(target, "wb") as handle:
        handle.write(MAGIC)
        handle.write(struct.pack("<Q", len(encoded)))
        handle.write(encoded)
        for chunk in chunks:
            handle.write(chunk)
    logger.info("wrote %s checkpoint %s (%d bytes of data)", kind, target, offset)
    return target


def read_checkpoint(path: PathLike, kind: Optional[str] = None) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    """
    Read a checkpoint back.

    Raises:
        ConfigError: If the file is missing, not a checkpoint, of another
            kind or of an unknown version
    """
    source = Path(path)
    if not source.exists():
        raise ConfigError(f"checkpoint {source} does not exist")
    blob = source.read_bytes()
    if blob[:8] != MAGIC:
        raise ConfigError(f"{source} is not a polaron-lab checkpoint")
    (length,) = struct.unpack("<Q", blob[8:16])
    try:
        header = json.loads(blob[16 : 16 + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"corrupt checkpoint header in {source}") from exc
    if header.get("version") != VERSION:
        raise ConfigError(f"unsupported checkpoint version {header.get('version')}")
    if kind is not None and header.get("kind") != kind:
        raise ConfigError(f"expected a {kind} checkpoint, found {header.get('kind')}")

    data = blob[16 + length :]
    arrays: Dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        count = int(np.prod(entry["shape"], dtype=np.int64)) * (2 if entry["dtype"] == "complex128" else 1)
        start = entry["offset"]
        arrays[entry["name"]] = _decode(data[start : start + 8 * count], entry["shape"], entry["dtype"])
    return header, arrays


def _basis_header(basis: PlaneWaveBasis) -> Dict[str, Any]:
    return {"lattice": basis.lattice.basis.tolist(), "ecut": basis.ecut, "grid_dims": list(basis.grid_dims)}


def _basis_from(entry: Mapping[str, Any], gvectors: np.ndarray) -> PlaneWaveBasis:
    return PlaneWaveBasis(Lattice(np.asarray(entry["lattice"])), float(entry["ecut"]), gvectors, tuple(entry["grid_dims"]))


def save_field(path: PathLike, field: PeriodicField, metadata: Optional[Dict[str, Any]] = None) -> Path:
    header = {"basis": _basis_header(field.basis), "field_kind": field.kind.value, "metadata": metadata or {}}
    return write_checkpoint(path, "field", {"gvectors": field.basis.gvectors, "coeffs": field.coeffs}, header)


def load_field(path: PathLike) -> Tuple[PeriodicField, Dict[str, Any]]:
    header, arrays = read_checkpoint(path, "field")
    basis = _basis_from(header["basis"], arrays["gvectors"])
    return PeriodicField(basis, arrays["coeffs"], FieldKind(header["field_kind"])), header["metadata"]


def save_crystal(path: PathLike, state: "CrystalGroundState", metadata: Optional[Dict[str, Any]] = None) -> Path:
    """Store a CrystalGroundState: densities, potential and bands."""
    header = {
        "density_basis": _basis_header(state.density_basis),
        "basis": _basis_header(state.basis),
        "mesh_shape": list(state.bloch.mesh.shape),
        "z": state.z,
        "fermi_level": state.fermi_level,
        "gap": state.gap,
        "scf_residual": state.scf_residual,
        "iterations": state.iterations,
        "metadata": metadata or {},
    }
    arrays = {
        "density_gvectors": state.density_basis.gvectors,
        "gvectors": state.basis.gvectors,
        "mu0": state.mu0.coeffs,
        "rho0": state.rho0.coeffs,
        "v0": state.v0.coeffs,
        "eigenvalues": state.bloch.eigenvalues,
        "eigenvectors": state.bloch.eigenvectors,
    }
    return write_checkpoint(path, "crystal", arrays, header)


def load_crystal(path: PathLike) -> "CrystalGroundState":
    from crystal.crystal_scf import BlochEigensystem, CrystalGroundState

    header, arrays = read_checkpoint(path, "crystal")
    density_basis = _basis_from(header["density_basis"], arrays["density_gvectors"])
    basis = _basis_from(header["basis"], arrays["gvectors"])
    mesh = BZMesh.monkhorst_pack(basis.lattice, header["mesh_shape"])
    bloch = BlochEigensystem(mesh, basis, arrays["eigenvalues"], arrays["eigenvectors"])
    return CrystalGroundState(
        mu0=PeriodicField(density_basis, arrays["mu0"], FieldKind.DENSITY),
        rho0=PeriodicField(density_basis, arrays["rho0"], FieldKind.DENSITY),
        v0=PeriodicField(density_basis, arrays["v0"], FieldKind.POTENTIAL),
        bloch=bloch,
        z=int(header["z"]),
        fermi_level=float(header["fermi_level"]),
        gap=float(header["gap"]),
        scf_residual=float(header["scf_residual"]),
        iterations=int(header["iterations"]),
    )


def save_defect_state(
    path: PathLike, state: "DefectState", q_size_gate: int = DEFECT_Q_SIZE_GATE, metadata: Optional[Dict[str, Any]] = None
) -> Path:
    """
    Store a DefectState: energies, rho_Q and nu; Q itself only below the size gate.
    """
    header = {
        "basis": _basis_header(state.rho_q.basis),
        "summary": state.summary(),
        "q_norm_report": state.q_norm_report,
        "fermi_level": state.fermi_level,
        "q_stored": bool(state.q.shape[0] <= q_size_gate),
        "metadata": metadata or {},
    }
    arrays = {"gvectors": state.rho_q.basis.gvectors, "nu": state.nu.coeffs, "rho_q": state.rho_q.coeffs}
    if header["q_stored"]:
        arrays["q"] = state.q
        arrays["occupied"] = state.occupied
    return write_checkpoint(path, "defect", arrays, header)


def load_defect_summary(path: PathLike) -> Dict[str, Any]:
    """Header summary and fields of a defect checkpoint."""
    header, arrays = read_checkpoint(path, "defect")
    basis = _basis_from(header["basis"], arrays["gvectors"])
    out: Dict[str, Any] = {
        "summary": header["summary"],
        "q_norm_report": header["q_norm_report"],
        "nu": PeriodicField(basis, arrays["nu"], FieldKind.DENSITY),
        "rho_q": PeriodicField(basis, arrays["rho_q"], FieldKind.DENSITY),
    }
    if header["q_stored"]:
        out["q"] = arrays["q"]
        out["occupied"] = arrays["occupied"]
    return out
