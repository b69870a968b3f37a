"""Tests for binary checkpoints."""

import os
import sys

import numpy as np
import pytest

# Add src directory to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from lattice_core.checkpoint import (
    MAGIC,
    load_crystal,
    load_defect_summary,
    load_field,
    read_checkpoint,
    save_crystal,
    save_defect_state,
    save_field,
    write_checkpoint,
)
from lattice_core.lattice import FieldKind, Lattice, PlaneWaveBasis, periodized_gaussians
from response.defect_scf import scf_defect
from utils.errors import ConfigError


class TestCheckpointFormat:
    """Test the PLABCHK1 container."""

    def test_header_and_arrays(self, tmp_path):
        """Test mixed arrays come back with their dtypes."""
        arrays = {
            "real": np.linspace(0.0, 1.0, 6).reshape(2, 3),
            "complex": np.array([1 + 2j, -3j]),
            "ints": np.array([[1, -2], [3, 4]]),
            "mask": np.array([True, False, True]),
        }
        path = write_checkpoint(tmp_path / "a.chk", "test", arrays, {"note": "hello"})
        assert path.read_bytes()[:8] == MAGIC
        header, loaded = read_checkpoint(path, "test")
        assert header["note"] == "hello"
        np.testing.assert_array_equal(loaded["real"], arrays["real"])
        np.testing.assert_array_equal(loaded["complex"], arrays["complex"])
        assert loaded["ints"].dtype == np.int64
        np.testing.assert_array_equal(loaded["ints"], arrays["ints"])
        assert loaded["mask"].dtype == bool

    def test_rejects_foreign_files(self, tmp_path):
        """Test missing files, wrong magic and wrong kinds are config errors."""
        with pytest.raises(ConfigError):
            read_checkpoint(tmp_path / "missing.chk")
        junk = tmp_path / "junk.chk"
        junk.write_bytes(b"NOTACHK!" + b"\0" * 16)
        with pytest.raises(ConfigError):
            read_checkpoint(junk)
        path = write_checkpoint(tmp_path / "b.chk", "field", {"x": np.zeros(2)})
        with pytest.raises(ConfigError):
            read_checkpoint(path, "crystal")

    def test_field_roundtrip(self, tmp_path):
        """Test a density field is restored on an equal basis."""
        basis = PlaneWaveBasis.from_cutoff(Lattice.cubic(3.0), 12.0)
        field = periodized_gaussians(basis, [[0.5, 1.0, 1.5]], [1.0], [0.6])
        save_field(tmp_path / "f.chk", field, {"label": "nu"})
        loaded, metadata = load_field(tmp_path / "f.chk")
        assert metadata == {"label": "nu"}
        assert loaded.basis.same_as(basis)
        assert loaded.kind == FieldKind.DENSITY
        np.testing.assert_array_equal(loaded.coeffs, field.coeffs)


class TestStateCheckpoints:
    """Test crystal and defect checkpoints."""

    def test_crystal_roundtrip(self, tmp_path, model_host):
        """Test a host crystal is restored with its bands and Fermi level."""
        save_crystal(tmp_path / "crystal.chk", model_host, {"name": "test"})
        loaded = load_crystal(tmp_path / "crystal.chk")
        assert loaded.z == model_host.z
        assert loaded.fermi_level == model_host.fermi_level
        assert loaded.gap == model_host.gap
        np.testing.assert_array_equal(loaded.bloch.eigenvalues, model_host.bloch.eigenvalues)
        np.testing.assert_array_equal(loaded.v0.coeffs, model_host.v0.coeffs)
        assert loaded.density_basis.same_as(model_host.density_basis)

    def test_defect_size_gate(self, tmp_path, response_ctx, small_defect):
        """Test Q is stored only below the size gate."""
        state = scf_defect(response_ctx, small_defect)
        save_defect_state(tmp_path / "small.chk", state, q_size_gate=10**6)
        save_defect_state(tmp_path / "gated.chk", state, q_size_gate=1)

        full = load_defect_summary(tmp_path / "small.chk")
        np.testing.assert_array_equal(full["q"], state.q)
        assert full["summary"]["f_crys"] == pytest.approx(state.f_crys)
        np.testing.assert_array_equal(full["rho_q"].coeffs, state.rho_q.coeffs)

        gated = load_defect_summary(tmp_path / "gated.chk")
        assert "q" not in gated
        assert gated["q_norm_report"]["total"] == pytest.approx(state.q_norm_report["total"])
