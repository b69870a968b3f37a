"""Tests for the experiment runners on the small cosine host."""

import os
import sys

import numpy as np
import pytest

# Add src directory to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from harness.config import load_config
from harness.experiments import (
    build_crystal,
    pekar_box_length,
    polaron_limit_checks,
    resolve_eps,
    run_cellmode,
    run_counterexample,
    run_crystal,
    run_defect,
    run_macrolimit,
    run_pekar,
    run_polaron_limit,
    run_receding_bumps,
    run_response,
)
from lattice_core.checkpoint import load_defect_summary
from response.dielectric import DielectricMatrix, parse_eps
from utils.errors import ConfigError, NoBinding

from tests.conftest import SMALL_OVERRIDES


class TestBuilders:
    """Test hosts and dielectric matrices built from configurations."""

    @pytest.mark.slow
    def test_gaussian_site_host(self):
        """Test the rHF host on one Gaussian nucleus."""
        cfg = load_config(
            overrides={
                "crystal": {
                    "kind": "gaussian_sites", "ecut": 5.0, "kmesh": [1, 1, 1],
                    "sites": [{"charge": 1.0, "width": 0.3}], "max_iter": 400,
                }
            }
        )
        crystal = build_crystal(cfg)
        assert crystal.z == 1
        assert crystal.scf_residual <= cfg.crystal.tol
        assert crystal.gap > 0.0

    def test_resolve_eps(self, small_config, model_host):
        """Test the override wins over the configured matrix."""
        assert resolve_eps(small_config, model_host).eps[0, 0] == 4.0
        assert resolve_eps(small_config, model_host, override="identity").is_identity()
        cfg = load_config(overrides={**SMALL_OVERRIDES, "response": {"supercell": [2, 2, 2]}})
        with pytest.raises(ConfigError):
            resolve_eps(cfg, None)


class TestSingleScaleStudies:
    """Test the crystal, cell-mode, response and defect studies."""

    def test_crystal_report(self, small_config, model_host):
        """Test the one-row crystal summary."""
        data = run_crystal(small_config, model_host).to_dict()
        assert len(data["rows"]) == 1
        row = data["rows"][0]
        assert row["z"] == 1
        assert row["gap"] == pytest.approx(model_host.gap)
        assert data["metadata"]["kind"] == "model_potential"

    def test_cellmode_report(self, small_config, model_host):
        """Test one row per m and the order checks."""
        report = run_cellmode(small_config, model_host)
        assert [row["m"] for row in report.rows] == [0.2, 0.1, 0.05]
        assert report.checks["energy_order"] >= 0.9
        assert report.checks["min_spectral_gap"] > 0.0

    def test_response_report(self, small_config, model_host):
        """Test a configured matrix skips the fit and the kinetic identities hold."""
        report, eps = run_response(small_config, model_host)
        assert eps.eps[0, 0] == 4.0
        assert report.rows == []
        assert report.checks["isotropic"] and report.checks["screens"]
        assert max(report.checks["kinetic_identity_residuals"]) < 1e-9
        assert report.checks["finite_matrix"]["order"] >= 0.9

    def test_defect_report(self, small_config, model_host, tmp_path):
        """Test the t-scaling rows, their bounds and the checkpoints."""
        cfg = load_config(overrides={**SMALL_OVERRIDES, "output": {"checkpoints": True}})
        report = run_defect(cfg, model_host, checkpoint_dir=tmp_path)
        assert [row["t"] for row in report.rows] == [1.0, 0.5, 0.25]
        for row in report.rows:
            assert row["status"] == "success"
            assert row["lower_bound_ok"] and row["upper_bound_ok"] and row["density_bound_ok"]
            assert abs(row["tr0"]) < 1e-8
            assert row["projector_identity_error"] < 1e-10
        assert report.checks["energy_order"] > 2.0
        assert report.checks["remainder_order"] > 1.5
        stored = load_defect_summary(tmp_path / "defect_t0.5.chk")
        assert stored["summary"]["f_crys"] == pytest.approx(report.rows[1]["f_crys"])


class TestPekarStudy:
    """Test the Pekar ground-state study."""

    def test_identity_does_not_bind(self, small_config):
        """Test eps = 1 raises NoBinding with exit code 0."""
        with pytest.raises(NoBinding):
            run_pekar(small_config, DielectricMatrix.identity())

    def test_isotropic_run(self, small_config):
        """Test the box follows the coupling and the oracle is compared."""
        eps = parse_eps(4.0)
        report = run_pekar(small_config, eps)
        row = report.rows[0]
        assert report.metadata["box_length"] == pytest.approx(pekar_box_length(48.0, eps))
        assert row["energy"] < 0.0
        assert row["double_evaluation_gap"] < 1e-10
        assert row["oracle_relative_error"] < 0.1
        assert row["radial_symmetry_error"] < 0.2


class TestLimitStudies:
    """Test the m studies."""

    def test_polaron_limit_without_screening(self, small_config, model_host, vacuum_host):
        """Test identity eps and the vacuum give no-binding rows."""
        for crystal, eps in ((model_host, DielectricMatrix.identity()), (vacuum_host, parse_eps(4.0))):
            report = run_polaron_limit(small_config, crystal, eps)
            assert [row["status"] for row in report.rows] == ["no_binding"]
            assert report.rows[0]["energy"] == 0.0

    @pytest.mark.slow
    def test_macrolimit(self, model_host):
        """Test every m row succeeds and the B_m form matches F_aux."""
        cfg = load_config(overrides={**SMALL_OVERRIDES, "macro": {"charge": 0.2, "width": 0.4}})
        report = run_macrolimit(cfg, model_host, parse_eps(4.0))
        assert [row["m"] for row in report.rows] == [1.0, 0.5]
        assert all(row["status"] == "success" for row in report.rows)
        assert report.checks["max_b_m_check"] < 1e-6
        for row in report.rows:
            assert row["f_crys_over_m"] <= 0.0
            assert row["pekar"] < 0.0

    @pytest.mark.slow
    def test_counterexample(self, small_config, model_host):
        """Test int B_m(nu_m) nu_m does not move with m."""
        report = run_counterexample(small_config, model_host, parse_eps(4.0))
        assert report.checks["b_m_constant"]
        gaps = [row["gap"] for row in report.rows]
        assert gaps[0] == pytest.approx(gaps[-1], rel=1e-6)

    @pytest.mark.slow
    def test_receding_bumps(self, small_config, model_host):
        """Test one row per m and separation."""
        report = run_receding_bumps(small_config, model_host, parse_eps(4.0))
        assert len(report.rows) == 2 * len(small_config.macro.bump_separations)
        assert all(row["status"] == "success" for row in report.rows)

    @pytest.mark.slow
    def test_polaron_limit(self, small_config, model_host):
        """Test the descent stays below the trial and the energy decoupling holds."""
        report = run_polaron_limit(small_config, model_host, parse_eps(4.0))
        row = report.rows[0]
        assert row["status"] == "success"
        assert row["trial_upper_bound_ok"]
        assert row["decoupling_residual"] < 1e-11
        assert np.isfinite(row["error_bar"])
        assert report.checks["within_tolerance"] == (
            abs(row["difference"]) <= 0.1 * abs(row["pekar_energy"])
        )
        assert report.error_bars["difference"] == row["error_bar"]

    def test_limit_gate_ignores_the_error_bar(self):
        """Test the 10 % acceptance is not widened by the error bar."""
        rows = [
            {"difference": 0.02, "pekar_energy": -0.1, "error_bar": 0.5, "density_distance": 0.3},
            {"difference": 0.015, "pekar_energy": -0.1, "error_bar": 0.5, "density_distance": 0.2},
        ]
        checks = polaron_limit_checks(rows)
        assert checks["tolerance"] == pytest.approx(0.01)
        assert not checks["within_tolerance"]
        assert checks["within_error_bar"]
        assert checks["density_distance_decreases"]
        rows[-1]["difference"] = -0.005
        assert polaron_limit_checks(rows)["within_tolerance"]
